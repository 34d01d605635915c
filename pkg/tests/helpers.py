import numpy as np

from egoexo import tensor as T


def analytic_grads(f, xs):
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with T.Tape() as tape:
        out = f(*xs)
        T.backward(out, tape)
    return [x.grad.copy() for x in xs]


def gradcheck(f, *arrays, h=1e-6, seed=None):
    """Max relative error between tape gradients and central differences (float64)."""
    with T.check_mode():
        xs = [T.Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]
        ana = analytic_grads(f, xs)
        errs = []
        for i, x in enumerate(xs):
            def g(xi, i=i):
                args = list(xs)
                args[i] = xi
                return f(*args)
            errs.append(T.rel_error(ana[i], T.finite_diff_grad(g, x, h)))
    return max(errs)



def param_gradcheck(ps, loss, per_tensor=2, h=1e-6, seed=0):
    """Spot-check ``per_tensor`` entries of every parameter against central differences.

    ``loss`` is a zero-argument callable; run inside ``T.check_mode()`` with a
    float64 store.  Entries where both gradients vanish are skipped.
    """
    ps.zero_grad()
    with T.Tape() as tape:
        T.backward(loss(), tape)
    pick = np.random.default_rng(seed)
    worst = 0.0
    for _, p in ps.items():
        flat = p.data.reshape(-1)
        idx = pick.choice(flat.size, min(per_tensor, flat.size), replace=False)
        num = []
        for i in idx:
            o = flat[i]
            with T.no_grad():
                flat[i] = o + h
                fp = loss().item()
                flat[i] = o - h
                fm = loss().item()
            flat[i] = o
            num.append((fp - fm) / (2 * h))
        ana = p.grad.reshape(-1)[idx]
        num = np.array(num)
        if max(np.abs(ana).max(), np.abs(num).max()) > 1e-8:
            worst = max(worst, T.rel_error(ana, num))
    return worst

"""Central finite-difference gradient checking for float64 torch code."""

import numpy as np
import torch


def rel_err(a: float, b: float, eps: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), eps)


def check_gradients(fn, tensors, n_probes: int, seed: int,
                    h: float = 1e-6, tol: float = 1e-4) -> int:
    """Compare autograd against central differences at random elements.

    ``fn`` maps the (shared, live) tensors to a scalar; ``tensors`` is the
    list of float64 leaf tensors to probe. Returns the number of probes
    executed; raises AssertionError on the first mismatch. Probes where both
    sides are essentially zero are counted as agreeing (relative error is
    meaningless at 0).
    """
    for t in tensors:
        assert t.dtype == torch.float64
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=False)
    rng = np.random.Generator(np.random.PCG64(seed))
    done = 0
    for _ in range(n_probes):
        ti = int(rng.integers(len(tensors)))
        t = tensors[ti]
        flat = t.detach().reshape(-1)
        ei = int(rng.integers(flat.numel()))
        with torch.no_grad():
            orig = flat[ei].item()
            flat[ei] = orig + h
            up = float(fn().detach())
            flat[ei] = orig - h
            down = float(fn().detach())
            flat[ei] = orig
        fd = (up - down) / (2 * h)
        an = float(grads[ti].reshape(-1)[ei])
        if abs(fd) < 1e-9 and abs(an) < 1e-9:
            done += 1
            continue
        err = rel_err(an, fd)
        assert err < tol, (
            f"gradient mismatch at tensor {ti} element {ei}: "
            f"analytic {an} vs finite-difference {fd} (rel err {err:.3e})"
        )
        done += 1
    for t in tensors:
        t.requires_grad_(False)
    return done

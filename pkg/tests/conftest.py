import numpy as np
import pytest

from panfuse.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def fd_gradcheck(build_fn, params, h=1e-3, rtol=1e-3, atol=1e-4,
                 max_coords=24, rng=None):
    """Central finite differences (float64) against tape gradients.

    build_fn reconstructs the scalar loss from the current parameter data;
    params are float64 leaf tensors. Checks up to max_coords coordinates per
    parameter. Returns the worst relative error seen.
    """
    rng = rng or np.random.default_rng(1234)
    loss = build_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        assert p.dtype == np.float64, "gradcheck wants float64 parameters"
        assert p.grad is not None, "parameter missing gradient"
        g = p.grad.copy()
        flat = p.data.reshape(-1)
        n = flat.size
        coords = range(n) if n <= max_coords else sorted(
            rng.choice(n, size=max_coords, replace=False).tolist())
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lp = build_fn().item()
            flat[idx] = orig - h
            lm = build_fn().item()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            tape = g.reshape(-1)[idx]
            err = abs(fd - tape)
            scale = max(abs(fd), abs(tape))
            rel = err / scale if scale > atol else 0.0
            worst = max(worst, rel)
            assert err <= atol + rtol * scale, (
                f"gradient mismatch at coord {idx}: fd={fd:.6g} tape={tape:.6g}")
        p.grad = None
    return worst


def leaf(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)

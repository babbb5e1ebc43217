import numpy as np
import pytest

from spfm.net import COND_WIDTH, INPUT_WIDTH, ModelParameters, NetInput, embed_condition, init_params, loss_and_grad


def small_widths(*hidden):
    return [INPUT_WIDTH, *hidden, 2]


def random_input(rng, n, null_rows=()):
    angle = rng.uniform(0, 2 * np.pi, n)
    radius = rng.uniform(0.5, 2.5, n)
    use_null = np.zeros(n, dtype=bool)
    use_null[list(null_rows)] = True
    return NetInput(rng.standard_normal((n, 2)), rng.uniform(0, 1, n), embed_condition(angle, radius), use_null)


def constant_field(c, widths=None):
    """Parameters whose field is the constant vector ``c`` everywhere."""
    widths = widths or small_widths(4)
    p = init_params(0, widths)
    p = ModelParameters([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases],
                        np.zeros(COND_WIDTH))
    p.biases[-1][:] = c
    return p


def oracle_field(target, radius, gain=100.0):
    """Conditional branch outputs ``target`` for conditions of the given radius;
    the null branch (null embedding = 0) outputs exactly 0.

    One hidden SiLU unit reads only the radius slot: silu(gain * r) equals
    gain * r once the sigmoid rounds to 1.0, and silu(0) = 0.
    """
    widths = small_widths(1)
    p = constant_field((0.0, 0.0), widths)
    p.weights[0][INPUT_WIDTH - 1, 0] = gain
    p.weights[1][0] = np.asarray(target, dtype=np.float64) / (gain * radius)
    return p


def unflatten(like: ModelParameters, flat: np.ndarray) -> ModelParameters:
    arrays, off = [], 0
    for a in like.arrays():
        arrays.append(flat[off:off + a.size].reshape(a.shape).copy())
        off += a.size
    return ModelParameters.from_arrays(arrays)


def fd_gradient(params, inp, target, h=1e-5):
    """Central differences of the mean loss, entry by entry."""
    flat = params.flat()
    grad = np.empty_like(flat)
    for k in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[k] += h
        dn[k] -= h
        grad[k] = (loss_and_grad(unflatten(params, up), inp, target)[0]
                   - loss_and_grad(unflatten(params, dn), inp, target)[0]) / (2 * h)
    return grad


def assert_grad_matches(analytic, numeric, rtol=1e-4):
    # relative error per entry; entries whose true gradient is below the
    # finite-difference noise floor (~1e-10) are compared absolutely there
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    ok = err <= rtol * scale + 1e-9
    assert ok.all(), f"worst relative error {np.max(err / np.maximum(scale, 1e-300))}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append "C<k> PASS|FAIL: ..." lines here; they are echoed
# in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def report(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

import numpy as np

from rescorr import autodiff as ad

# One line per acceptance criterion, echoed at the end of the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def finite_difference_grads(fn, arrays, step=1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    ``fn`` receives the arrays and returns a float.  Independent oracle
    for every analytic gradient in the engine.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = g.reshape(-1)
        base = [np.array(x, dtype=np.float64, copy=True) for x in arrays]
        for i in range(flat.size):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k].reshape(-1)[i] += step
            minus[k].reshape(-1)[i] -= step
            flat[i] = (fn(*plus) - fn(*minus)) / (2.0 * step)
        grads.append(g)
    return grads


def check_gradients(build, arrays, rel_tol=1e-4, step=1e-5):
    """Compare tape gradients of ``build`` against central differences.

    ``build`` maps Tensors to a scalar Tensor; it is re-run inside a
    fresh tape for the analytic side and through values only for the
    numeric side.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(*tensors)
        tape.backward(loss)
    analytic = [t.grad_array() for t in tensors]

    def value_fn(*arrs):
        return build(*[ad.Tensor(a) for a in arrs]).item()

    numeric = finite_difference_grads(value_fn, arrays, step=step)
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), 1e-6)
        rel = np.abs(a - n) / denom
        assert rel.max() < rel_tol, f"gradient mismatch: max rel err {rel.max():.3e}"
    return analytic, numeric

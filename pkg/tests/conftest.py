import numpy as np
import pytest

from ternvit.tensor import Tensor, backward


def numeric_grad(fn, arrays, index, step=1e-3):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + step
        plus = fn(*base)
        target[i] = orig - step
        minus = fn(*base)
        target[i] = orig
        grad[i] = (plus - minus) / (2 * step)
    return grad


def analytic_grads(build, arrays):
    """Gradients of ``build(*tensors)`` w.r.t. every input, in float64."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(build(*tensors))
    return [t.grad for t in tensors]


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(build, arrays, step=1e-3):
    """Max relative error between analytic and central-difference gradients over all inputs."""
    got = analytic_grads(build, arrays)

    def scalar(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    return max(rel_error(g, numeric_grad(scalar, arrays, i, step)) for i, g in enumerate(got))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_cifar_batch(path, records):
    """``records``: list of (label, uint8 array 3x32x32)."""
    with open(path, "wb") as f:
        for label, pixels in records:
            f.write(bytes([label]))
            f.write(np.asarray(pixels, dtype=np.uint8).tobytes())


def write_idx(path, magic, dims, payload: bytes):
    import struct

    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{len(dims)}I", *dims))
        f.write(payload)


def write_mnist(directory, split, images, labels, image_magic=0x803, label_magic=0x801):
    names = {"train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
             "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")}[split]
    images = np.asarray(images, dtype=np.uint8)
    write_idx(directory / names[0], image_magic, images.shape, images.tobytes())
    write_idx(directory / names[1], label_magic, (len(labels),), bytes(labels))


# acceptance criteria register their verdicts here; printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

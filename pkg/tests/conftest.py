import numpy as np
import pytest
import torch

from signface.topology import FaceGraph

FD_STEP = 1e-5
FD_TOL = 1e-4


def central_difference(loss_fn, tensor, step=FD_STEP, max_entries=None, rng=None):
    """Numerical gradient of ``loss_fn()`` w.r.t. ``tensor`` (modified in place)."""
    flat = tensor.data.view(-1)
    idx = np.arange(flat.numel())
    if max_entries is not None and len(idx) > max_entries:
        idx = np.sort((rng or np.random.default_rng(0)).choice(idx, max_entries, replace=False))
    grad = np.zeros(len(idx))
    with torch.no_grad():
        for n, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + step
            up = float(loss_fn())
            flat[i] = orig - step
            down = float(loss_fn())
            flat[i] = orig
            grad[n] = (up - down) / (2 * step)
    return idx, grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradient_errors(forward, tensors, seed=0, max_entries=200):
    """Compare autograd with central differences for each tensor.

    ``forward()`` returns an output tensor; the scalar loss is its inner
    product with a fixed random projection. Returns {name: relative error}.
    """
    gen = torch.Generator().manual_seed(seed)
    out = forward()
    proj = torch.randn(out.shape, dtype=torch.float64, generator=gen)

    def loss():
        return (forward() * proj).sum()

    for t in tensors.values():
        t.grad = None
    loss().backward()
    errors = {}
    rng = np.random.default_rng(seed)
    for name, t in tensors.items():
        analytic = t.grad.detach().reshape(-1).numpy().copy()
        idx, numeric = central_difference(loss, t, max_entries=max_entries, rng=rng)
        errors[name] = relative_error(analytic[idx], numeric)
    return errors


def brute_force_knn(points, k):
    """O(P^2) reference: explicit distance table, ties broken by lower index."""
    n = len(points)
    edges = set()
    for i in range(n):
        cand = sorted((float(np.hypot(*(points[i] - points[j]))), j) for j in range(n) if j != i)
        for _, j in cand[:k]:
            edges.add((min(i, j), max(i, j)))
    return edges


def bfs_hops(edges, n, src):
    """Independent hop counter via repeated frontier expansion on an edge list."""
    dist = {src: 0}
    frontier = {src}
    d = 0
    while frontier:
        d += 1
        nxt = set()
        for a, b in edges:
            for u, v in ((a, b), (b, a)):
                if u in frontier and v not in dist:
                    nxt.add(v)
        for v in nxt:
            dist[v] = d
        frontier = nxt
    return [dist.get(i, np.inf) for i in range(n)]


def small_graph(n, seed):
    rng = np.random.default_rng(seed)
    edges = {(i, i + 1) for i in range(n - 1)}  # a path keeps it connected
    for _ in range(n):
        a, b = sorted(rng.choice(n, 2, replace=False))
        edges.add((int(a), int(b)))
    return FaceGraph(n, frozenset(edges))


@pytest.fixture(scope="session")
def synthetic8():
    from signface.preprocessing import generate_synthetic_dataset

    return generate_synthetic_dataset(8, 0)


# acceptance criteria report, filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {name}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])

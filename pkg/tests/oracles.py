"""Independent reference computations shared by the test modules."""
import numpy as np
import torch


def central_fd(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of a scalar ``fn`` w.r.t. ``x`` (double precision)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            g[i] = (hi - lo) / (2 * eps)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def assert_grad_matches(fn, x, rtol=1e-4, atol=1e-8):
    """Autograd gradient of ``fn`` at ``x`` agrees with central differences."""
    torch.testing.assert_close(autograd_grad(fn, x), central_fd(fn, x), rtol=rtol, atol=atol)


def param_grad_check(loss_fn, module: torch.nn.Module, rtol=1e-4, atol=1e-8):
    """Check every trainable parameter of ``module`` against central differences."""
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        module.zero_grad()
        loss_fn().backward()
        analytic = p.grad.detach().clone()

        def at(value, p=p):
            with torch.no_grad():
                saved = p.detach().clone()
                p.copy_(value)
                out = loss_fn()
                p.copy_(saved)
            return out

        numeric = central_fd(at, p.detach())
        torch.testing.assert_close(analytic, numeric, rtol=rtol, atol=atol, msg=lambda m, n=name: f"{n}: {m}")


def otsu_brute_force(values: np.ndarray, bins: int = 256) -> float:
    """Threshold maximising between-class variance, every bin edge tried explicitly."""
    v = np.asarray(values, dtype=np.float64).ravel()
    edges = np.linspace(0.0, 1.0, bins + 1)
    best, best_t = -1.0, None
    for t in edges[1:-1]:
        lo, hi = v[v < t], v[v >= t]
        if len(lo) == 0 or len(hi) == 0:
            continue
        w0, w1 = len(lo) / len(v), len(hi) / len(v)
        var = w0 * w1 * (lo.mean() - hi.mean()) ** 2
        if var > best + 1e-15:
            best, best_t = var, t
    return best_t


def block_average(features: np.ndarray, mask: np.ndarray, n: int):
    """Per-cell fg/bg means with an explicit double loop over pixels."""
    c, h, w = features.shape
    rows = [r for r in np.array_split(np.arange(h), n)]
    cols = [q for q in np.array_split(np.arange(w), n)]
    out = {}
    for i, rr in enumerate(rows):
        for j, cc in enumerate(cols):
            fg, bg = [], []
            for y in rr:
                for x in cc:
                    (fg if mask[y, x] else bg).append(features[:, y, x])
            out[i, j] = (np.mean(fg, axis=0) if fg else None, np.mean(bg, axis=0) if bg else None, len(fg), len(bg))
    return out


def tally_miou(results):
    """Per-pixel pooled IoU per class, then mean; loops over every pixel."""
    inter, union = {}, {}
    for pred, gt, cls in results:
        for p, g in zip(np.ravel(pred), np.ravel(gt)):
            inter[cls] = inter.get(cls, 0) + int(p == 1 and g == 1)
            union[cls] = union.get(cls, 0) + int(p == 1 or g == 1)
    ious = [inter[c] / union[c] if union[c] else 1.0 for c in inter]
    return sum(ious) / len(ious)


def tally_fb_iou(results):
    counts = {0: [0, 0], 1: [0, 0]}
    for pred, gt, _ in results:
        for p, g in zip(np.ravel(pred), np.ravel(gt)):
            for c in (0, 1):
                counts[c][0] += int(p == c and g == c)
                counts[c][1] += int(p == c or g == c)
    vals = [counts[c][0] / counts[c][1] if counts[c][1] else 1.0 for c in (0, 1)]
    return sum(vals) / 2

"""Central finite differences, independent of autograd."""
import torch


def fd_gradient(fn, params, h=1e-5):
    """d fn / d p for every entry of every tensor in ``params`` (perturbed in place)."""
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for k in range(flat.numel()):
                old = flat[k].item()
                flat[k] = old + h
                plus = float(fn())
                flat[k] = old - h
                minus = float(fn())
                flat[k] = old
                gflat[k] = (plus - minus) / (2 * h)
            out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for a, b in zip(analytic, numeric):
        a, b = a.detach().double(), b.double()
        scale = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
        worst = max(worst, float(((a - b).abs() / scale).max()))
    return worst

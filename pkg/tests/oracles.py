"""Independent reference computations used by the unit and acceptance tests."""
import math

import numpy as np
import torch

from retrosynth.chemio import COMMON_ELEMENTS, parse_formula


def central_fd_check(loss_fn, params, step=1e-4):
    """Largest relative error between autograd and central differences over ``params``.

    The relative error of each tensor is ||fd - ad|| / max(||fd||, ||ad||, 1e-12).
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        ad = p.grad.detach().clone().reshape(-1)
        fd = torch.zeros_like(ad)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
            fd[i] = (up - down) / (2 * step)
        denom = max(fd.norm().item(), ad.norm().item(), 1e-12)
        worst = max(worst, (fd - ad).norm().item() / denom)
    return worst


def brute_mpc(kb_reps, query_rep, k, exclude_pos=()):
    """Exhaustive cosine scan; ties go to the lower position."""
    q = query_rep / np.linalg.norm(query_rep)
    scored = []
    for i, r in enumerate(kb_reps):
        if i in exclude_pos:
            continue
        sim = float(np.dot(r / np.linalg.norm(r), q))
        scored.append((-sim, i))
    scored.sort()
    return [i for _, i in scored[:k]]


def brute_nre(h_target, kb_recipes, vocab, h_vocab, target_elements, k, exclude_id=None):
    """Exhaustive dH scan with the element filter; most negative first, ties by position."""
    allowed = set(target_elements) | COMMON_ELEMENTS
    scored = []
    for i, r in enumerate(kb_recipes):
        if r.id == exclude_id:
            continue
        elems = {e for j in r.precursor_ids for e in parse_formula(vocab.precursors[j]).amounts}
        if not elems <= allowed:
            continue
        mean = math.fsum(h_vocab[j] for j in r.precursor_ids) / len(r.precursor_ids)
        scored.append((h_target - mean, i))
    scored.sort()
    return [i for _, i in scored[:k]]


def brute_sets(p, top_n, max_size):
    """All subsets of the top_n most probable precursors, scored and sorted."""
    import itertools

    cand = sorted(np.argsort(-p, kind="stable")[:top_n].tolist())
    out = []
    for size in range(1, min(max_size, len(cand)) + 1):
        for s in itertools.combinations(cand, size):
            score = 1.0
            for c in cand:
                score *= p[c] if c in s else 1.0 - p[c]
            out.append((s, score))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


def full_power_set(p, top_n, max_size):
    """Scores every one of the 2^l label vectors, then keeps those inside the decoding restriction."""
    l = len(p)
    cand = set(np.argsort(-p, kind="stable")[:top_n].tolist())
    out = []
    for mask in range(1, 2 ** l):
        s = tuple(i for i in range(l) if mask >> i & 1)
        if not set(s) <= cand or len(s) > max_size:
            continue
        score = 1.0
        for c in sorted(cand):
            score *= p[c] if c in s else 1.0 - p[c]
        out.append((s, score))
    out.sort(key=lambda t: (-t[1], t[0]))
    return out


def gradient_cases(seed=0):
    """(name, loss_fn, params) for each trainable stack at D=8, K=2, l=4."""
    import torch.nn.functional as F

    from retrosynth.chemio import fallback_element_features
    from retrosynth.encoder import GraphBank, GraphEncoder
    from retrosynth.fusion import FusionConfig, RetroModel
    from retrosynth.mpc import MpcModel
    from retrosynth.nre import NreModel

    D, K, L = 8, 2, 4
    feats = fallback_element_features(dim=6, seed=seed)
    rng = np.random.default_rng(seed)
    comps = [parse_formula(f) for f in ["LiFePO4", "SiO2", "BaTiO3", "O", "Ca(OH)2"]]
    bank = GraphBank(comps, feats)
    batch = bank.pack(range(len(comps)))
    dt = torch.float64

    enc = GraphEncoder(6, D, 2, seed=seed)
    w = torch.from_numpy(rng.normal(size=(len(comps), D)))
    yield "encoder", lambda: (enc(batch) * w).sum(), list(enc.parameters())

    mpc = MpcModel(L, D, seed=seed)
    x = torch.from_numpy(np.stack([c.vector for c in comps]))
    y = torch.from_numpy((rng.random((len(comps), L)) < 0.5).astype(float))
    y_tilde = y * torch.from_numpy((rng.random((len(comps), L)) < 0.5).astype(float))
    yield "mpc", lambda: F.binary_cross_entropy_with_logits(mpc(x, y_tilde), y), list(mpc.parameters())

    nre = NreModel(6, D, 2, seed=seed)
    e = torch.from_numpy(rng.normal(-1.5, 0.5, len(comps)))
    yield "nre_head", lambda: torch.mean((nre(batch) - e) ** 2), list(nre.head.parameters())
    yield "nre_full", lambda: torch.mean((nre(batch) - e) ** 2), list(nre.parameters())

    model = RetroModel(6, L, FusionConfig(hidden_dim=D, n_layers=2, k=K, seed=seed))
    target_idx = np.array([0, 1, 2])
    mpc_idx = np.array([[3, 4], [0, 2], [1, -1]])
    nre_idx = np.array([[4, 1], [-1, -1], [0, 3]])
    yy = torch.from_numpy((rng.random((3, L)) < 0.5).astype(float)).to(dt)

    def fusion_loss():
        return F.binary_cross_entropy_with_logits(model.forward_indices(bank, target_idx, mpc_idx, nre_idx), yy)

    yield "fusion", fusion_loss, list(model.parameters())

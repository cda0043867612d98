"""Small in-memory datasets and runners shared by the trainer and acceptance tests."""

import numpy as np
import torch

from vesrec.config import TrainConfig
from vesrec.data import DatasetManifest, ManifestEntry
from vesrec.trainer import DomainData, _batch, alternating_step, new_state
from vesrec.vessel import VesselMask, extract_edges


def make_domain(n, size=16, seed=0, labels=None, domain="source", with_anchors=True, brightness=0.0):
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = [i % 5 for i in range(n)]
    entries = [ManifestEntry(f"{domain}{i}", f"{domain}/{i}.png", None, lab) for i, lab in enumerate(labels)]
    images = np.clip(rng.random((n, 3, size, size)) * 0.6 + 0.2 + brightness, 0, 1).astype(np.float32)
    anchors = None
    if with_anchors:
        anchors = []
        for _ in range(n):
            m = np.zeros((size, size), bool)
            m[:, rng.integers(2, size - 2)] = True
            m[rng.integers(2, size - 2), :] = True
            anchors.append(extract_edges(VesselMask(m)))
    lab = torch.tensor([-1 if x is None else x for x in labels], dtype=torch.long)
    return DomainData(DatasetManifest(entries, domain), torch.from_numpy(images), lab, anchors)


def separable_two_grade(n=64, size=16, seed=0):
    """Grade 0 images are dark, grade 4 images bright; a linear threshold on mean intensity separates them."""
    rng = np.random.default_rng(seed)
    labels = [0 if i % 2 == 0 else 4 for i in range(n)]
    base = np.array([0.25 if g == 0 else 0.75 for g in labels], dtype=np.float32)[:, None, None, None]
    images = np.clip(base + 0.1 * rng.standard_normal((n, 3, size, size)), 0, 1).astype(np.float32)
    entries = [ManifestEntry(f"s{i}", f"{i}.png", None, g) for i, g in enumerate(labels)]
    return DomainData(DatasetManifest(entries, "source"), torch.from_numpy(images), torch.tensor(labels))


def snapshot(params):
    return [p.detach().clone() for p in params]


def bitwise_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


def isolation_run(n_steps=50, seed=0, size=16, batch=8):
    """Run ``n_steps`` alternating steps; count sub-steps that touched a frozen group."""
    cfg = TrainConfig(image_sizes=(size,), seed=seed, batch_size=batch)
    state = new_state(cfg)
    source = make_domain(4 * batch, size, seed)
    target = make_domain(4 * batch, size, seed + 1, labels=[None] * (4 * batch), domain="target", brightness=0.1)
    part = state.net.partition()
    gen_params, disc_params = part.params("theta_e", "theta_d", "theta_m"), part.params("theta_ad")
    violations = {"gen": 0, "disc": 0}
    rng = np.random.default_rng(seed)
    for _ in range(n_steps):
        before = {"disc": snapshot(disc_params)}

        def probe(stage):
            if stage == "gen":
                if not bitwise_equal(before["disc"], disc_params):
                    violations["gen"] += 1
                before["gen"] = snapshot(gen_params)
            else:
                if not bitwise_equal(before["gen"], gen_params):
                    violations["disc"] += 1

        src = _batch(source, rng.choice(len(source), batch, replace=False))
        tgt = _batch(target, rng.choice(len(target), batch, replace=False))
        alternating_step(state, src, tgt, cfg, isolation_probe=probe)
    return violations, state

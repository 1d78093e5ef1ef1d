"""Image retrieval with a classical global descriptor, and covisibility clustering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

THUMB = 8
HIST_BINS = 32
DESCRIPTOR_DIM = THUMB * THUMB * 3 + 3 * HIST_BINS


def global_descriptor(image):
    """8x8 area-averaged RGB thumbnail followed by per-channel 32-bin histograms, L2-normalized."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    H, W = img.shape[:2]
    rows = np.linspace(0, H, THUMB + 1).round().astype(int)
    cols = np.linspace(0, W, THUMB + 1).round().astype(int)
    thumb = np.empty((THUMB, THUMB, 3))
    for i in range(THUMB):
        for j in range(THUMB):
            block = img[rows[i]:max(rows[i + 1], rows[i] + 1), cols[j]:max(cols[j + 1], cols[j] + 1)]
            thumb[i, j] = block.reshape(-1, 3).mean(axis=0)
    hist = [np.histogram(np.clip(img[:, :, c], 0, 1), bins=HIST_BINS, range=(0.0, 1.0))[0] / (H * W)
            for c in range(3)]
    d = np.concatenate([thumb.ravel(), *hist])
    n = np.linalg.norm(d)
    return d / n if n > 0 else np.full(DESCRIPTOR_DIM, 1.0 / np.sqrt(DESCRIPTOR_DIM))


def retrieve_knn(db, query_descriptor, k):
    """Ids of the ``k`` most cosine-similar database entries; ties go to the lower id."""
    if not db:
        raise ValueError("empty retrieval database")
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = [entry[0] for entry in db]
    D = np.array([entry[1] for entry in db], dtype=np.float64)
    q = np.asarray(query_descriptor, dtype=np.float64)
    sims = D @ q / (np.linalg.norm(D, axis=1) * np.linalg.norm(q) + 1e-300)
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [ids[i] for i in order[:k]]


@dataclass
class ObservationGraph:
    frames: list
    observations: dict   # frame id -> set of 3D point ids

    def __post_init__(self):
        self.frames = list(self.frames)
        missing = [f for f in self.frames if f not in self.observations]
        if missing:
            raise ValueError(f"frames without observations: {missing}")


def covisibility_cluster(graph, frame_ids):
    """Connected components of ``frame_ids`` linked by shared point ids.

    Clusters are sorted internally and listed by descending size, then lowest id.
    """
    known = set(graph.frames)
    frame_ids = list(dict.fromkeys(frame_ids))
    for f in frame_ids:
        if f not in known:
            raise KeyError(f"unknown frame id: {f!r}")
    parent = {f: f for f in frame_ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    owner = {}
    for f in sorted(frame_ids):
        for p in sorted(graph.observations[f]):
            if p in owner:
                ra, rb = find(owner[p]), find(f)
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
            else:
                owner[p] = f
    groups = {}
    for f in frame_ids:
        groups.setdefault(find(f), []).append(f)
    clusters = [sorted(g) for g in groups.values()]
    clusters.sort(key=lambda c: (-len(c), c[0]))
    return clusters

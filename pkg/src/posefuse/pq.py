"""Product-quantization index over unit-norm pose features.

Features are unit-normalized before indexing so that ascending squared-L2
order equals descending cosine order; search is therefore a plain ADC scan:
per query, build an (m, k) table of query-subvector-to-centroid squared
distances, then sum one table entry per stored code byte.  The coarse
shortlist is re-ranked with the exact affine-aligned similarity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import affine
from .errors import (
    BadMagic,
    CorruptPayload,
    DimMismatch,
    EmptyBank,
    EmptyIndex,
    EmptyInput,
    IdMismatch,
    IndivisibleDim,
    KTooLarge,
    TooFewVectors,
    UnsupportedVersion,
)
from .pose import HandPose, extract_feature, normalize_feature

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

MAGIC = b"TAPQ"
VERSION = 1

_ASSIGN_CHUNK = 262_144


@dataclass
class PQIndex:
    """Trained sub-codebooks plus the byte codes and ids of every stored vector.

    codebooks: (m, k, dim/m) float32, codes: (n, m) uint8.  `raw_norms`
    optionally keeps the pre-normalization feature norms for diagnostics and
    `train_mse` the per-subspace quantization-MSE history of training;
    neither survives serialization.
    """

    dim: int
    m: int
    k: int
    codebooks: np.ndarray
    codes: np.ndarray
    ids: list[str]
    raw_norms: np.ndarray | None = None
    train_mse: list[list[float]] | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def subdim(self) -> int:
        return self.dim // self.m


@dataclass(frozen=True)
class SearchParams:
    """Coarse shortlist size and final match count for two-stage retrieval."""

    shortlist_n: int
    k: int

    def __post_init__(self):
        if self.shortlist_n < 1:
            raise ValueError(f"shortlist_n must be >= 1, got {self.shortlist_n}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.k > self.shortlist_n:
            raise KTooLarge(f"k={self.k} exceeds shortlist_n={self.shortlist_n}")


def _assign(vectors: np.ndarray, centroids: np.ndarray):
    """Nearest-centroid labels and squared distances, ties to the lowest index.

    Distances accumulate the ||x||^2 term in float64 so the SSE bookkeeping
    stays reliable at large n.
    """
    cent_sq = (centroids.astype(np.float64) ** 2).sum(axis=1).astype(np.float32)
    labels = np.empty(len(vectors), dtype=np.int32)
    dists = np.empty(len(vectors), dtype=np.float64)
    for start in range(0, len(vectors), _ASSIGN_CHUNK):
        block = vectors[start:start + _ASSIGN_CHUNK]
        # ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; the ||x||^2 term does not
        # affect the argmin so it is added after selection.
        partial = cent_sq[None, :] - 2.0 * (block @ centroids.T)
        lab = np.argmin(partial, axis=1)
        labels[start:start + len(block)] = lab
        x_sq = (block.astype(np.float64) ** 2).sum(axis=1)
        picked = partial[np.arange(len(block)), lab].astype(np.float64)
        dists[start:start + len(block)] = np.maximum(picked + x_sq, 0.0)
    return labels, dists


def _kmeans_pp(vectors: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ initialization (distance-squared sampling)."""
    n = len(vectors)
    x_sq = (vectors.astype(np.float64) ** 2).sum(axis=1)
    centroids = np.empty((k, vectors.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centroids[0] = vectors[first]
    d2 = np.maximum(x_sq - 2.0 * (vectors @ centroids[0]).astype(np.float64)
                    + float(centroids[0] @ centroids[0]), 0.0)
    for t in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centroids[t] = vectors[pick]
        dd = np.maximum(x_sq - 2.0 * (vectors @ centroids[t]).astype(np.float64)
                        + float(centroids[t] @ centroids[t]), 0.0)
        np.minimum(d2, dd, out=d2)
    return centroids


def _repair_empty(centroids, counts, labels, dists, vectors):
    """Reseed each empty cluster from the farthest point of the largest cluster."""
    counts = counts.copy()
    dist_work = dists.copy()
    for empty in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        member_dist = np.where(labels == donor, dist_work, -np.inf)
        far = int(np.argmax(member_dist))
        centroids[empty] = vectors[far]
        dist_work[far] = -np.inf
        counts[donor] -= 1
        counts[empty] = 1
    return centroids


def _lloyd(vectors: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd's algorithm with k-means++ init; returns (centroids, mse_history)."""
    n, dim = vectors.shape
    centroids = _kmeans_pp(vectors, k, rng)
    history = []
    previous = None
    for _ in range(iters):
        labels, dists = _assign(vectors, centroids)
        mse = float(dists.sum() / n)
        history.append(mse)
        # Lloyd monotonicity, with slack for float32 assignment roundoff
        assert previous is None or mse <= previous * (1.0 + 1e-7) + 1e-12, \
            f"quantization MSE increased: {previous} -> {mse}"
        if previous is not None and abs(previous - mse) <= 1e-6 * max(previous, 1e-30):
            break
        previous = mse
        counts = np.bincount(labels, minlength=k)
        sums = np.empty((k, dim), dtype=np.float64)
        for d in range(dim):
            sums[:, d] = np.bincount(labels, weights=vectors[:, d].astype(np.float64),
                                     minlength=k)
        nonzero = np.maximum(counts, 1)[:, None]
        updated = (sums / nonzero).astype(np.float32)
        keep = counts == 0
        if keep.any():
            updated[keep] = centroids[keep]
            updated = _repair_empty(updated, counts, labels, dists, vectors)
        centroids = updated
    return centroids, history


def train_codebooks(vectors, m: int, k: int, iters: int, seed: int,
                    ids=None, raw_norms=None) -> PQIndex:
    """Train per-subspace codebooks on unit-norm features and encode the inputs.

    Parameters
    ----------
    vectors : (n, dim) array of unit-norm features.
    m : number of subspaces; dim must be divisible by m.
    k : centroids per subspace, at most 256 so codes fit one byte.
    iters : Lloyd iteration cap; stops early when the relative MSE change
        drops below 1e-6.
    seed : RNG seed; each subspace derives its own deterministic stream.
    ids : optional string identifiers, defaulting to "0", "1", ...
    """
    data = np.ascontiguousarray(np.atleast_2d(np.asarray(vectors)), dtype=np.float32)
    if data.size == 0:
        raise EmptyInput("no vectors supplied")
    n, dim = data.shape
    if not 1 <= k <= 256:
        raise ValueError(f"k must be in [1, 256], got {k}")
    if n < k:
        raise TooFewVectors(f"{n} vectors < {k} centroids per subspace")
    if dim % m != 0:
        raise IndivisibleDim(f"dim {dim} not divisible by m={m}")
    if ids is None:
        ids = [str(i) for i in range(n)]
    else:
        ids = [str(i) for i in ids]
        if len(ids) != n:
            raise ValueError(f"got {len(ids)} ids for {n} vectors")

    sub = dim // m
    codebooks = np.empty((m, k, sub), dtype=np.float32)
    codes = np.empty((n, m), dtype=np.uint8)
    histories = []
    for j in range(m):
        block = np.ascontiguousarray(data[:, j * sub:(j + 1) * sub])
        centroids, history = _lloyd(block, k, iters, np.random.default_rng([seed, j]))
        codebooks[j] = centroids
        labels, _ = _assign(block, centroids)
        codes[:, j] = labels.astype(np.uint8)
        histories.append(history)

    norms = None if raw_norms is None else np.asarray(raw_norms, dtype=np.float64)
    return PQIndex(dim=dim, m=m, k=k, codebooks=codebooks, codes=codes,
                   ids=ids, raw_norms=norms, train_mse=histories)


def encode(index: PQIndex, vector) -> np.ndarray:
    """Quantize one feature vector to m code bytes (nearest centroid per subspace)."""
    vec = np.asarray(vector, dtype=np.float32)
    if vec.shape != (index.dim,):
        raise DimMismatch(f"expected a ({index.dim},) vector, got shape {vec.shape}")
    sub = index.subdim
    out = np.empty(index.m, dtype=np.uint8)
    for j in range(index.m):
        labels, _ = _assign(vec[None, j * sub:(j + 1) * sub], index.codebooks[j])
        out[j] = labels[0]
    return out


if numba is not None:
    @numba.njit(cache=True)
    def _adc_sum(tables, codes):  # pragma: no cover - exercised via adc_distances
        n, m = codes.shape
        out = np.empty(n, dtype=np.float32)
        for i in range(n):
            acc = np.float32(0.0)
            for j in range(m):
                acc += tables[j, codes[i, j]]
            out[i] = acc
        return out

    @numba.njit(cache=True)
    def _sift_down(heap_d, heap_i, start, size):  # pragma: no cover
        root = start
        while True:
            child = 2 * root + 1
            if child >= size:
                break
            right = child + 1
            # child with the lexicographically larger (distance, index) pair
            if right < size and (heap_d[right] > heap_d[child] or
                                 (heap_d[right] == heap_d[child]
                                  and heap_i[right] > heap_i[child])):
                child = right
            if (heap_d[child] > heap_d[root] or
                    (heap_d[child] == heap_d[root] and heap_i[child] > heap_i[root])):
                heap_d[root], heap_d[child] = heap_d[child], heap_d[root]
                heap_i[root], heap_i[child] = heap_i[child], heap_i[root]
                root = child
            else:
                break

    @numba.njit(cache=True)
    def _adc_topn(tables, codes, topn):  # pragma: no cover
        """Single-pass distance sum plus bounded max-heap selection; keeps
        the topn smallest (distance, insertion index) pairs."""
        n, m = codes.shape
        size = topn if topn < n else n
        heap_d = np.empty(size, dtype=np.float32)
        heap_i = np.empty(size, dtype=np.int64)
        count = 0
        for i in range(n):
            acc = np.float32(0.0)
            for j in range(m):
                acc += tables[j, codes[i, j]]
            if count < size:
                heap_d[count] = acc
                heap_i[count] = i
                count += 1
                if count == size:
                    for start in range(size // 2 - 1, -1, -1):
                        _sift_down(heap_d, heap_i, start, size)
            elif acc < heap_d[0]:
                # an equal distance never displaces: the incumbent has the
                # lower insertion index by construction
                heap_d[0] = acc
                heap_i[0] = i
                _sift_down(heap_d, heap_i, 0, size)
        return heap_d[:count], heap_i[:count]
else:  # pragma: no cover
    def _adc_sum(tables, codes):
        out = tables[0].take(codes[:, 0])
        for j in range(1, codes.shape[1]):
            out += tables[j].take(codes[:, j])
        return out

    _adc_topn = None


def adc_distances(index: PQIndex, query) -> np.ndarray:
    """Approximate squared L2 distance from a query to every stored vector."""
    return _adc_sum(_query_tables(index, query), index.codes)


def _select_ascending(dists: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n smallest distances, ties by ascending insertion index."""
    total = len(dists)
    if n >= total:
        return np.lexsort((np.arange(total), dists))
    part = np.argpartition(dists, n - 1)[:n]
    bound = dists[part].max()
    pool = np.flatnonzero(dists <= bound)
    order = np.lexsort((pool, dists[pool]))
    return pool[order][:n]


def _query_tables(index: PQIndex, query) -> np.ndarray:
    vec = np.asarray(query, dtype=np.float32)
    if vec.shape != (index.dim,):
        raise DimMismatch(f"expected a ({index.dim},) query, got shape {vec.shape}")
    subqueries = vec.reshape(index.m, 1, index.subdim)
    return np.ascontiguousarray(((index.codebooks - subqueries) ** 2).sum(axis=2))


def adc_search(index: PQIndex, query, n: int) -> list[str]:
    """Ids of the n nearest stored vectors by ADC distance, ascending."""
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n == 0:
        return []
    if numba is not None:
        heap_d, heap_i = _adc_topn(_query_tables(index, query), index.codes,
                                   min(n, index.n))
        order = np.lexsort((heap_i, heap_d))
        return [index.ids[i] for i in heap_i[order]]
    dists = adc_distances(index, query)
    picked = _select_ascending(dists, min(n, index.n))
    return [index.ids[i] for i in picked]


def retrieve_pq(index: PQIndex, bank, target: HandPose, params: SearchParams):
    """Two-stage retrieval: ADC shortlist on raw normalized features, then
    exact affine-aligned re-ranking of the shortlist.  Returns Match list.
    """
    if index.n == 0:
        raise EmptyIndex("index holds no vectors")
    bank = list(bank)
    if not bank:
        raise EmptyBank("pose bank is empty")
    by_id = {p.id: p for p in bank}
    query = normalize_feature(extract_feature(target))
    shortlist = adc_search(index, query, min(params.shortlist_n, index.n))
    missing = [i for i in shortlist if i not in by_id]
    if missing:
        raise IdMismatch(f"index ids missing from bank: {missing[:5]}")

    position = {pid: pos for pos, pid in enumerate(index.ids)}
    kps = np.stack([by_id[i].keypoints2d for i in shortlist])
    scores, theta, valid = affine.score_candidates(kps, target)
    order = np.lexsort((np.array([position[i] for i in shortlist]), -scores))
    matches = []
    for idx in order:
        if not valid[idx]:
            continue
        matches.append(affine.Match(shortlist[idx], float(scores[idx]),
                                    affine._theta_to_affine(theta[idx])))
        if len(matches) == params.k:
            break
    return matches


def save_index(index: PQIndex, path) -> None:
    """Write the index in the little-endian binary format (magic "TAPQ")."""
    header = struct.pack("<4sIIIIQ", MAGIC, VERSION, index.dim, index.m,
                         index.k, index.n)
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(np.ascontiguousarray(index.codebooks, dtype=np.float32).tobytes())
        handle.write(np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes())
        for pid in index.ids:
            raw = pid.encode("utf-8")
            handle.write(struct.pack("<I", len(raw)))
            handle.write(raw)


def load_index(path) -> PQIndex:
    """Read an index written by save_index; the roundtrip is bit-exact."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: expected magic {MAGIC!r}")
    header_size = struct.calcsize("<4sIIIIQ")
    if len(blob) < header_size:
        raise CorruptPayload(f"{path}: truncated header")
    _, version, dim, m, k, n = struct.unpack_from("<4sIIIIQ", blob, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version} not supported")
    if m == 0 or dim % m != 0:
        raise CorruptPayload(f"{path}: dim {dim} not divisible by m {m}")
    offset = header_size

    cb_bytes = m * k * (dim // m) * 4
    if len(blob) < offset + cb_bytes:
        raise CorruptPayload(f"{path}: truncated codebooks")
    codebooks = np.frombuffer(blob, dtype="<f4", count=m * k * (dim // m),
                              offset=offset).reshape(m, k, dim // m).copy()
    offset += cb_bytes

    code_bytes = n * m
    if len(blob) < offset + code_bytes:
        raise CorruptPayload(f"{path}: truncated codes")
    codes = np.frombuffer(blob, dtype=np.uint8, count=n * m,
                          offset=offset).reshape(n, m).copy()
    offset += code_bytes

    ids = []
    for _ in range(n):
        if len(blob) < offset + 4:
            raise CorruptPayload(f"{path}: truncated id table")
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if len(blob) < offset + length:
            raise CorruptPayload(f"{path}: truncated id entry")
        ids.append(blob[offset:offset + length].decode("utf-8"))
        offset += length
    if offset != len(blob):
        raise CorruptPayload(f"{path}: {len(blob) - offset} trailing bytes")
    return PQIndex(dim=dim, m=m, k=k, codebooks=codebooks, codes=codes, ids=ids)

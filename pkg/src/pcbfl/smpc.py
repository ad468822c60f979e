"""Two-party secure dot product by invertible-matrix masking, and assembly of
the global patient cosine-similarity matrix.

Setting: site 1 holds ``A`` (N1 x d, one embedding per row), site 2 holds
``B`` (d x N2, one embedding per column). With an invertible ``M``::

    A @ B = (A @ M) @ (M^-1 @ B) = A1 @ B1 + A2 @ B2

where ``A1 = A @ M[:, :d/2]``, ``A2 = A @ M[:, d/2:]``, ``B1 = M^-1[:d/2] @ B``
and ``B2 = M^-1[d/2:] @ B``. Only ``A1`` and ``B2`` leave their owners.
Honest-but-curious parties, real arithmetic; no collusion resistance.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .embed import EmbeddingMatrix
from .fedsim import COORDINATOR, Bus, MessageKind, ProtocolError, site_name
from .seeding import derive_seed

MAX_CONDITION = 1e6
MAX_ATTEMPTS = 8
INVERSE_TOL = 1e-10
FORBIDDEN_TAGS = frozenset({"A", "B", "A2", "B1"})
SIM_MAGIC = b"PCBFLSIM"
SIM_VERSION = 1


class DegenerateEmbeddingError(ValueError):
    pass


class MaskGenerationError(RuntimeError):
    pass


class SecurityViolation(AssertionError):
    pass


@dataclass(frozen=True)
class MaskPair:
    d: int
    M: np.ndarray
    M_inv: np.ndarray
    seed: int

    @property
    def left(self) -> np.ndarray:
        return self.M[:, : self.d // 2]

    @property
    def right(self) -> np.ndarray:
        return self.M[:, self.d // 2:]

    @property
    def inv_top(self) -> np.ndarray:
        return self.M_inv[: self.d // 2]

    @property
    def inv_bottom(self) -> np.ndarray:
        return self.M_inv[self.d // 2:]


def l2_normalize(values: np.ndarray, patient_ids: Sequence | None = None) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        who = patient_ids[zero[0]] if patient_ids is not None else f"row {zero[0]}"
        raise DegenerateEmbeddingError(f"embedding of patient {who} has zero norm")
    return values / norms[:, None]


def normalize_embeddings(emb: EmbeddingMatrix) -> EmbeddingMatrix:
    return EmbeddingMatrix(emb.site_id, emb.patient_ids, l2_normalize(emb.values, emb.patient_ids))


def _chebyshev_generator(d: int, rng: np.random.Generator) -> np.ndarray:
    """Vandermonde-type generator in the Chebyshev basis, T_j(x_i).

    Nodes are jittered Chebyshev points (distinct, so every column subset is
    independent); the basis keeps the matrix well conditioned where a
    monomial Vandermonde of this size would not be.
    """
    base = (2 * np.arange(d) + 1) * np.pi / (2 * d)
    theta = base + rng.uniform(-0.3, 0.3, size=d) * np.pi / (2 * d)
    gen = np.cos(np.outer(theta, np.arange(d)))
    gen[:, 0] *= np.sqrt(1.0 / d)
    gen[:, 1:] *= np.sqrt(2.0 / d)
    return gen


def _random_rotation(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def gen_mask(d: int, seed: int) -> MaskPair:
    if d < 2 or d % 2:
        raise ValueError(f"mask dimension must be even and at least 2, got {d}")
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng(seed if attempt == 0 else derive_seed(seed, "retry", attempt))
        M = _random_rotation(d, rng) @ _chebyshev_generator(d, rng)
        if np.linalg.cond(M) >= MAX_CONDITION:
            continue
        M_inv = np.linalg.inv(M)
        if np.max(np.abs(M @ M_inv - np.eye(d))) > INVERSE_TOL:
            continue
        return MaskPair(d, M, M_inv, seed)
    raise MaskGenerationError(f"no well-conditioned {d}x{d} mask after {MAX_ATTEMPTS} attempts")


def secure_dot(A: np.ndarray, B: np.ndarray, mask: MaskPair, bus: Bus | None = None,
               parties: tuple[str, str] = ("site1", "site2")) -> np.ndarray:
    """Compute ``A @ B`` with the masked-split protocol, relayed by the server."""
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != mask.d or B.shape[0] != mask.d:
        raise ProtocolError(f"shapes {A.shape} x {B.shape} do not fit a {mask.d}-dim mask")
    bus = bus or Bus()
    p1, p2 = parties
    # step 1: server distributes the mask halves
    M = bus.send(COORDINATOR, p1, MessageKind.SMPC_MASK, mask.M, "M")
    M_inv = bus.send(COORDINATOR, p2, MessageKind.SMPC_MASK, mask.M_inv, "M_inv")
    h = mask.d // 2
    # steps 2-3: local masking, half of each share set goes to the server
    A1, A2 = A @ M[:, :h], A @ M[:, h:]
    B1, B2 = M_inv[:h] @ B, M_inv[h:] @ B
    A1_srv = bus.send(p1, COORDINATOR, MessageKind.SMPC_SHARE, A1, "A1")
    B2_srv = bus.send(p2, COORDINATOR, MessageKind.SMPC_SHARE, B2, "B2")
    # step 4: relay
    B2_at_1 = bus.send(COORDINATOR, p1, MessageKind.SMPC_SHARE, B2_srv, "B2")
    A1_at_2 = bus.send(COORDINATOR, p2, MessageKind.SMPC_SHARE, A1_srv, "A1")
    # steps 5-6: partial products
    V_a = bus.send(p1, COORDINATOR, MessageKind.SMPC_SHARE, A2 @ B2_at_1, "V_a")
    V_b = bus.send(p2, COORDINATOR, MessageKind.SMPC_SHARE, A1_at_2 @ B1, "V_b")
    return V_a + V_b


def audit_bus(bus: Bus):
    """Raise if any message carried raw embeddings or the private share halves."""
    leaked = FORBIDDEN_TAGS & set(bus.tags())
    if leaked:
        raise SecurityViolation(f"private matrices observed on the bus: {sorted(leaked)}")


def ambiguous_input(A: np.ndarray, mask: MaskPair, row: int = 0, scale: float = 1.0) -> np.ndarray:
    """Return A' != A with A' @ M_left == A @ M_left.

    Adds a left-null-space vector of ``M_left`` (dimension d/2) to one row,
    showing the transmitted share does not pin down the input.
    """
    u, _, _ = np.linalg.svd(mask.left, full_matrices=True)
    null = u[:, mask.d // 2:]
    A_alt = np.array(A, dtype=np.float64, copy=True)
    A_alt[row] += scale * null[:, 0]
    return A_alt


@dataclass
class SimilarityMatrix:
    S: np.ndarray
    registry: list  # (site_id, local_row, patient_id) per global index

    @property
    def size(self) -> int:
        return self.S.shape[0]

    def site_slices(self) -> dict:
        out = {}
        for idx, (sid, _, _) in enumerate(self.registry):
            lo, hi = out.get(sid, (idx, idx))
            out[sid] = (min(lo, idx), max(hi, idx + 1))
        return {sid: slice(lo, hi) for sid, (lo, hi) in out.items()}

    def save(self, matrix_path, registry_path):
        p = self.size
        iu = np.triu_indices(p)
        with open(matrix_path, "wb") as fh:
            fh.write(SIM_MAGIC + struct.pack("<IQ", SIM_VERSION, p))
            fh.write(np.ascontiguousarray(self.S[iu], dtype="<f8").tobytes())
        with open(registry_path, "w") as fh:
            json.dump([{"index": i, "site_id": int(s), "local_row": int(r), "patient_id": pid}
                       for i, (s, r, pid) in enumerate(self.registry)], fh)

    @classmethod
    def load(cls, matrix_path, registry_path) -> "SimilarityMatrix":
        with open(matrix_path, "rb") as fh:
            if fh.read(len(SIM_MAGIC)) != SIM_MAGIC:
                raise ValueError(f"{matrix_path} is not a similarity container")
            version, p = struct.unpack("<IQ", fh.read(12))
            if version != SIM_VERSION:
                raise ValueError(f"unsupported similarity container version {version}")
            tri = np.frombuffer(fh.read(), dtype="<f8")
        if tri.size != p * (p + 1) // 2:
            raise ValueError(f"{matrix_path} is truncated")
        S = np.zeros((p, p))
        S[np.triu_indices(p)] = tri
        S = S + np.triu(S, 1).T
        with open(registry_path) as fh:
            reg = [(e["site_id"], e["local_row"], e["patient_id"]) for e in json.load(fh)]
        return cls(S, reg)


def _mirror_upper(S: np.ndarray) -> np.ndarray:
    return np.triu(S) + np.triu(S, 1).T


def assemble_similarity(embeddings: Sequence[EmbeddingMatrix], seed: int = 0, bus: Bus | None = None,
                        workers: int = 1) -> tuple[SimilarityMatrix, int]:
    """Global P x P cosine similarity: local blocks in plaintext, cross-site
    blocks through :func:`secure_dot` with a fresh mask per site pair.

    Returns the matrix and the number of masks generated.
    """
    bus = bus or Bus()
    ordered = sorted(embeddings, key=lambda e: e.site_id)
    units = {e.site_id: l2_normalize(e.values, e.patient_ids) for e in ordered}
    registry = [(e.site_id, r, pid) for e in ordered for r, pid in enumerate(e.patient_ids)]
    offsets, pos = {}, 0
    for e in ordered:
        offsets[e.site_id] = slice(pos, pos + len(e.patient_ids))
        pos += len(e.patient_ids)
    dims = {e.dim for e in ordered}
    if len(dims) != 1:
        raise ProtocolError(f"sites disagree on the embedding dimension: {sorted(dims)}")
    d = dims.pop()
    S = np.zeros((pos, pos))
    for sid, E in units.items():
        S[offsets[sid], offsets[sid]] = E @ E.T

    pairs = list(combinations([e.site_id for e in ordered], 2))

    def session(pair):
        c, k = pair
        mask = gen_mask(d, derive_seed(seed, "smpc", "mask", c, k))
        return pair, secure_dot(units[c], units[k].T, mask, bus, (site_name(c), site_name(k)))

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(session, pairs))
    else:
        results = [session(p) for p in pairs]
    for (c, k), V in results:
        S[offsets[c], offsets[k]] = V
        S[offsets[k], offsets[c]] = V.T
    return SimilarityMatrix(_mirror_upper(S), registry), len(pairs)


def plaintext_similarity(embeddings: Sequence[EmbeddingMatrix]) -> SimilarityMatrix:
    """Centralized reference: pooled unit embeddings times their transpose."""
    ordered = sorted(embeddings, key=lambda e: e.site_id)
    E = np.vstack([l2_normalize(e.values, e.patient_ids) for e in ordered])
    registry = [(e.site_id, r, pid) for e in ordered for r, pid in enumerate(e.patient_ids)]
    return SimilarityMatrix(_mirror_upper(E @ E.T), registry)

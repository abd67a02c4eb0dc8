"""RelNet forward computation over a tape.

The memory has ``D`` entity slots (rows of ``M``, each with a trainable key)
and ``D * D`` relational cells ``R[i, j]``, one per ordered pair of slots.
Every function works on a batch: sentence encodings are ``(B, K)``, entity
memory ``(B, D, K)`` and relational memory ``(B, D, D, K)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tape, Tensor
from .babi import PAD, Batch

CHECKPOINT_VERSION = 1

PARAM_NAMES = (
    "E", "f_ent", "f_rel", "f_q", "keys",
    "U", "V", "W", "A", "B", "C", "H", "Z",
    "prelu_ent", "prelu_rel", "prelu_out",
)


@dataclass
class HyperParams:
    vocab_size: int
    sentence_len: int
    dim: int = 100
    slots: int = 20
    normalize_relations: bool = False
    prelu_init: float = 1.0
    init_std: float = 0.1

    def __post_init__(self):
        if self.dim < 1 or self.slots < 1 or self.sentence_len < 1:
            raise ValueError(f"dim, slots and sentence_len must be >= 1: {self}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        K, D, L, V = self.dim, self.slots, self.sentence_len, self.vocab_size
        return {
            "E": (V, K), "f_ent": (L, K), "f_rel": (L, K), "f_q": (L, K),
            "keys": (D, K),
            "U": (K, K), "V": (K, K), "W": (K, K),
            "A": (K, K), "B": (K, K),
            "C": (K, 3 * K), "H": (K, K), "Z": (V, K),
            "prelu_ent": (1,), "prelu_rel": (1,), "prelu_out": (1,),
        }


def init_params(hyper: HyperParams, seed: int = 0, dtype=np.float64) -> Dict[str, np.ndarray]:
    """Gaussian weights, all-ones masks, identity on the first output-projection block."""
    rng = np.random.default_rng(seed)
    std = hyper.init_std
    params = {}
    for name, shape in hyper.shapes().items():
        if name.startswith("f_"):
            params[name] = np.ones(shape)
        elif name.startswith("prelu_"):
            params[name] = np.full(shape, hyper.prelu_init)
        else:
            params[name] = rng.normal(0.0, std, size=shape)
    K = hyper.dim
    params["C"][:, :K] = np.eye(K)
    for name, value in params.items():
        params[name] = value.astype(dtype)
    check_params(params, hyper)
    return params


def check_params(params: Dict[str, np.ndarray], hyper: HyperParams) -> None:
    shapes = hyper.shapes()
    missing = set(shapes) - set(params)
    if missing:
        raise ValueError(f"missing parameters: {sorted(missing)}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ValueError(f"parameter {name} has non-finite entries")


def leaves(params: Dict[str, np.ndarray], trainable: bool = True) -> Dict[str, Tensor]:
    return {k: Tensor(v, trainable=trainable, name=k) for k, v in params.items()}


@dataclass
class MemoryState:
    M: Tensor   # (B, D, K) entity slots
    R: Tensor   # (B, D, D, K) relational slots


@dataclass
class ForwardTrace:
    """Gate activity while reading, and the final attention over slot pairs.

    Arrays carry a leading batch axis; ``lengths`` gives each example's real
    sentence count so :meth:`example` can drop padded steps.
    """

    entity_gates: List[np.ndarray] = field(default_factory=list)     # T x (B, D)
    relation_gates: List[np.ndarray] = field(default_factory=list)   # T x (B, D, D)
    attention: Optional[np.ndarray] = None                           # (B, D, D)
    lengths: Optional[np.ndarray] = None

    def example(self, b: int = 0) -> dict:
        steps = len(self.entity_gates) if self.lengths is None else int(self.lengths[b])
        return {
            "steps": [{"g_m": self.entity_gates[t][b].tolist(),
                       "g_r": self.relation_gates[t][b].tolist()} for t in range(steps)],
            "attention": None if self.attention is None else self.attention[b].tolist(),
        }


def _const(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=like.dtype))


def encode_sentence(tape: Tape, tokens: np.ndarray, mask: Tensor, E: Tensor) -> Tensor:
    """Masked bag of embeddings: sum over non-pad positions of ``mask[i] * E[token_i]``.

    ``tokens`` has shape ``(..., n)`` with ``n <= L``; shorter rows are padded.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    L = mask.shape[0]
    if tokens.shape[-1] > L:
        raise ValueError(f"sentence of length {tokens.shape[-1]} exceeds mask length {L}")
    if tokens.size and tokens.max() >= E.shape[0]:
        raise ValueError(f"token id {int(tokens.max())} outside vocabulary of {E.shape[0]}")
    if tokens.shape[-1] < L:
        pad = [(0, 0)] * (tokens.ndim - 1) + [(0, L - tokens.shape[-1])]
        tokens = np.pad(tokens, pad, constant_values=PAD)
    emb = tape.gather(E, tokens)                                   # (..., L, K)
    keep = _const((tokens != PAD)[..., None], E)                   # (..., L, 1)
    weighted = tape.mul(tape.mul(emb, mask), keep)
    return tape.sum(weighted, axis=-2)


def init_state(tape: Tape, p: Dict[str, Tensor], batch_size: int = 1) -> MemoryState:
    """Entity slots start at their unit-normalized keys, relations at zero."""
    keys = p["keys"]
    norms = np.linalg.norm(keys.value, axis=-1)
    if np.any(norms < 1e-8):
        raise ValueError(f"key {int(np.argmin(norms))} has near-zero norm")
    D, K = keys.shape
    M = tape.broadcast_to(tape.l2_normalize(keys), (batch_size, D, K))
    R = Tensor(np.zeros((batch_size, D, D, K), dtype=keys.dtype))
    return MemoryState(M, R)


def entity_gates(tape: Tape, s: Tensor, state: MemoryState, keys: Tensor) -> Tensor:
    """Independent sigmoid gate per slot: sigmoid(<s, m_i + k_i>)."""
    B, K = s.shape
    return tape.sigmoid(tape.inner(tape.reshape(s, (B, 1, K)), tape.add(state.M, keys)))


def _select(tape: Tape, step_mask: Optional[np.ndarray], new: Tensor, old: Tensor) -> Tensor:
    """Take ``new`` for live examples and ``old`` for padded time steps."""
    if step_mask is None or step_mask.all():
        return new
    shape = (len(step_mask),) + (1,) * (new.value.ndim - 1)
    live = _const(step_mask.reshape(shape), old)
    dead = _const(1.0 - step_mask.reshape(shape), old)
    return tape.add(tape.mul(live, new), tape.mul(dead, old))


def update_entities(tape: Tape, s: Tensor, gates: Tensor, state: MemoryState,
                    p: Dict[str, Tensor], step_mask: Optional[np.ndarray] = None) -> MemoryState:
    """Gated PReLU update of every slot, followed by unit normalization."""
    M = state.M
    B, D, K = M.shape
    cand = tape.add(tape.add(tape.matvec(p["U"], M), tape.matvec(p["V"], p["keys"])),
                    tape.reshape(tape.matvec(p["W"], s), (B, 1, K)))
    cand = tape.prelu(cand, p["prelu_ent"])
    updated = tape.add(M, tape.mul(tape.reshape(gates, (B, D, 1)), cand))
    new_M = tape.l2_normalize(updated)
    return MemoryState(_select(tape, step_mask, new_M, M), state.R)


def relation_gates(tape: Tape, s_rel: Tensor, g_m: Tensor, state: MemoryState) -> Tensor:
    """g_r[i, j] = g_m[i] * g_m[j] * sigmoid(<s_rel, r_ij>)."""
    B, K = s_rel.shape
    D = g_m.shape[1]
    content = tape.sigmoid(tape.inner(tape.reshape(s_rel, (B, 1, 1, K)), state.R))
    pair = tape.mul(tape.reshape(g_m, (B, D, 1)), tape.reshape(g_m, (B, 1, D)))
    return tape.mul(pair, content)


def update_relations(tape: Tape, s_rel: Tensor, gates: Tensor, state: MemoryState,
                     p: Dict[str, Tensor], normalize: bool = False,
                     step_mask: Optional[np.ndarray] = None) -> MemoryState:
    R = state.R
    B, D, _, K = R.shape
    cand = tape.add(tape.matvec(p["A"], R), tape.reshape(tape.matvec(p["B"], s_rel), (B, 1, 1, K)))
    cand = tape.prelu(cand, p["prelu_rel"])
    new_R = tape.add(R, tape.mul(tape.reshape(gates, (B, D, D, 1)), cand))
    if normalize:
        new_R = tape.l2_normalize(new_R)
    return MemoryState(state.M, _select(tape, step_mask, new_R, R))


def read_document(tape: Tape, stories: np.ndarray, p: Dict[str, Tensor], hyper: HyperParams,
                  lengths: Optional[np.ndarray] = None) -> Tuple[MemoryState, ForwardTrace]:
    """Read ``stories`` of shape ``(B, T, L)`` one sentence at a time.

    Time steps at or beyond an example's length leave its memory untouched.
    """
    stories = np.asarray(stories, dtype=np.int64)
    B, T = stories.shape[:2]
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    state = init_state(tape, p, B)
    trace = ForwardTrace(lengths=lengths)
    for t in range(T):
        live = (lengths > t).astype(p["E"].dtype)
        mask = None if live.all() else live
        s = encode_sentence(tape, stories[:, t], p["f_ent"], p["E"])
        s_rel = encode_sentence(tape, stories[:, t], p["f_rel"], p["E"])
        g_m = entity_gates(tape, s, state, p["keys"])
        state = update_entities(tape, s, g_m, state, p, step_mask=mask)
        g_r = relation_gates(tape, s_rel, g_m, state)
        state = update_relations(tape, s_rel, g_r, state, p,
                                 normalize=hyper.normalize_relations, step_mask=mask)
        trace.entity_gates.append(g_m.value)
        trace.relation_gates.append(g_r.value)
    return state, trace


def answer(tape: Tape, questions: np.ndarray, state: MemoryState,
           p: Dict[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """Attention over the projected pair memories ``C [m_i; m_j; r_ij]``.

    Returns ``(logits, attention)`` with shapes ``(B, V)`` and ``(B, D, D)``.
    """
    M, R = state.M, state.R
    B, D, K = M.shape
    q = encode_sentence(tape, questions, p["f_q"], p["E"])
    m_i = tape.broadcast_to(tape.reshape(M, (B, D, 1, K)), (B, D, D, K))
    m_j = tape.broadcast_to(tape.reshape(M, (B, 1, D, K)), (B, D, D, K))
    pairs = tape.matvec(p["C"], tape.concat([m_i, m_j, R], axis=-1))        # (B, D, D, K)
    scores = tape.inner(tape.reshape(q, (B, 1, 1, K)), pairs)
    attn = tape.reshape(tape.softmax(tape.reshape(scores, (B, D * D))), (B, D, D))
    u = tape.sum(tape.mul(tape.reshape(attn, (B, D, D, 1)), pairs), axis=(1, 2))
    o = tape.prelu(tape.add(q, tape.matvec(p["H"], u)), p["prelu_out"])
    return tape.matvec(p["Z"], o), attn


def forward(tape: Tape, batch: Batch, p: Dict[str, Tensor],
            hyper: HyperParams) -> Tuple[Tensor, ForwardTrace]:
    state, trace = read_document(tape, batch.stories, p, hyper, batch.lengths)
    logits, attn = answer(tape, batch.questions, state, p)
    trace.attention = attn.value
    return logits, trace


def predict(params: Dict[str, np.ndarray], hyper: HyperParams, batch: Batch) -> np.ndarray:
    """Logits for a batch without keeping gradients."""
    tape = Tape(record=False)
    logits, _ = forward(tape, batch, leaves(params, trainable=False), hyper)
    return logits.value


def save_checkpoint(path, hyper: HyperParams, params: Dict[str, np.ndarray],
                    vocab_tokens: Optional[List[str]] = None, meta: Optional[dict] = None) -> None:
    """Store hyperparameters, vocabulary and every parameter array in one ``.npz``."""
    check_params(params, hyper)
    header = {"version": CHECKPOINT_VERSION, "hyper": asdict(hyper),
              "vocab": vocab_tokens, "meta": meta or {}}
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """Returns ``(hyper, params, vocab_tokens, meta)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
        params = {k.split("/", 1)[1]: z[k].copy() for k in z.files if k.startswith("param/")}
    hyper = HyperParams(**header["hyper"])
    check_params(params, hyper)
    return hyper, params, header.get("vocab"), header.get("meta", {})

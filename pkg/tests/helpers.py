"""Random micro-configurations shared by the model, gradient and acceptance tests."""
import numpy as np

from relnet.babi import Batch
from relnet.model import HyperParams


def random_params(hyper, rng, scale=0.5):
    """Fully random parameters, so no block starts at a special value."""
    params = {}
    for name, shape in hyper.shapes().items():
        if name.startswith("prelu_"):
            params[name] = rng.uniform(0.1, 1.5, size=shape)
        elif name.startswith("f_"):
            params[name] = rng.uniform(0.2, 1.5, size=shape)
        else:
            params[name] = rng.normal(0.0, scale, size=shape)
    return params


def random_micro(seed, K=None, D=None, V=None, L=None, T=None, B=1, normalize_relations=False):
    """A random model plus a batch of ``B`` stories with ragged lengths.

    Returns ``(hyper, params, batch, raw)`` where ``raw`` lists each example as
    ``(sentences, question)`` with unpadded token lists.
    """
    rng = np.random.default_rng(seed)
    K = K or int(rng.integers(2, 9))
    D = D or int(rng.integers(1, 5))
    V = V or int(rng.integers(4, 21))
    L = L or int(rng.integers(2, 7))
    T = T if T is not None else int(rng.integers(1, 6))
    hyper = HyperParams(vocab_size=V, sentence_len=L, dim=K, slots=D,
                        normalize_relations=normalize_relations)
    params = random_params(hyper, rng)
    raw = []
    for b in range(B):
        t_b = T if b == 0 else int(rng.integers(0, T + 1))
        sents = [list(rng.integers(1, V, size=int(rng.integers(1, L + 1)))) for _ in range(t_b)]
        question = list(rng.integers(1, V, size=int(rng.integers(1, L + 1))))
        raw.append((sents, question))
    batch = pack(raw, L, rng.integers(1, V, size=B))
    return hyper, params, batch, raw


def pack(raw, L, answers):
    B = len(raw)
    T = max((len(s) for s, _ in raw), default=0)
    stories = np.zeros((B, T, L), dtype=np.int64)
    questions = np.zeros((B, L), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, (sents, q) in enumerate(raw):
        lengths[b] = len(sents)
        for t, s in enumerate(sents):
            stories[b, t, :len(s)] = s
        questions[b, :len(q)] = q
    return Batch(stories, lengths, questions, np.asarray(answers, dtype=np.int64))


def as_lists(params):
    return {k: v.tolist() for k, v in params.items()}

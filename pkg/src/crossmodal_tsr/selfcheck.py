"""Built-in verification suites: per-op gradient checks, an independent
retrieval oracle, and the frozen metric fixtures.

Used by the command-line ``selfcheck`` command; failures name the culprit.
"""

from __future__ import annotations

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .fusion import FusionConfig, TemporalFusion, cross_attention
from .gradcheck import check_gradients
from .metrics import bleu_n, meteor, rouge_l
from .retrieval import RetrievalArchive, query_topk
from .tensor import BatchNormState, Tensor

# Test hook: set to an op name to corrupt its analytic gradient, proving
# the harness detects a broken backward rule.
_FAULT_INJECTION: str | None = None

_DTYPE = np.float64


def _p(rng, *shape):
    return Tensor(rng.standard_normal(shape).astype(_DTYPE), requires_grad=True)


def _op_cases(rng):
    """(name, params, build_loss) triples covering every differentiable op."""
    cases = []

    a, b = _p(rng, 3, 4), _p(rng, 4, 5)
    cases.append(("matmul", {"a": a, "b": b},
                  lambda: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b)))))

    x1 = _p(rng, 4, 6)
    cases.append(("softmax_rows", {"x": x1},
                  lambda: T.sum_all(T.mul(T.softmax_rows(x1),
                                          Tensor(rng.standard_normal((4, 6)))))))

    x2, g2, b2 = _p(rng, 5, 7), _p(rng, 7), _p(rng, 7)
    cases.append(("layer_norm", {"x": x2, "gain": g2, "bias": b2},
                  lambda: T.sum_all(T.mul(T.layer_norm(x2, g2, b2),
                                          Tensor(rng.standard_normal((5, 7)))))))

    x3 = _p(rng, 4, 3, 6)
    bn = BatchNormState(3, dtype=_DTYPE)
    cases.append(("batch_norm_1d", {"x": x3, "gamma": bn.gamma, "beta": bn.beta},
                  lambda: T.sum_all(T.mul(T.batch_norm_1d(x3, bn, train=True),
                                          Tensor(rng.standard_normal((4, 3, 6)))))))

    x4, w4, bias4 = _p(rng, 2, 3, 8), _p(rng, 5, 3, 3), _p(rng, 5)
    cases.append(("conv1d_tokens", {"x": x4, "w": w4, "b": bias4},
                  lambda: T.sum_all(T.mul(T.conv1d_tokens(x4, w4, bias4),
                                          Tensor(rng.standard_normal((2, 5, 8)))))))

    x5 = _p(rng, 6, 4)
    cases.append(("relu", {"x": x5},
                  lambda: T.sum_all(T.mul(T.relu(x5),
                                          Tensor(rng.standard_normal((6, 4)))))))

    x6, y6 = _p(rng, 3, 4), _p(rng, 3, 2)
    cases.append(("concat_last_axis", {"x": x6, "y": y6},
                  lambda: T.sum_all(T.mul(T.concat_last_axis([x6, y6]),
                                          Tensor(rng.standard_normal((3, 6)))))))

    x7 = _p(rng, 5, 4)
    cases.append(("mean_pool_tokens", {"x": x7},
                  lambda: T.sum_all(T.mul(T.mean_pool_tokens(x7),
                                          Tensor(rng.standard_normal(4))))))

    x8 = _p(rng, 3, 3)
    cases.append(("diagonal_2d", {"x": x8},
                  lambda: T.sum_all(T.mul(T.diagonal_2d(x8),
                                          Tensor(rng.standard_normal(3))))))

    x9 = _p(rng, 4, 4)
    cases.append(("exp_log", {"x": x9},
                  lambda: T.sum_all(T.log(T.add(T.exp(x9), 2.0)))))

    q, k_, v = _p(rng, 3, 5), _p(rng, 4, 5), _p(rng, 4, 5)
    cases.append(("cross_attention", {"q": q, "k": k_, "v": v},
                  lambda: T.sum_all(T.mul(cross_attention(q, k_, v),
                                          Tensor(rng.standard_normal((3, 5)))))))

    drop_mask = Tensor((rng.random((5, 5)) >= 0.3).astype(_DTYPE) / 0.7)
    x10 = _p(rng, 5, 5)
    cases.append(("dropout", {"x": x10},
                  lambda: T.sum_all(T.mul(T.mul(x10, drop_mask),
                                          Tensor(rng.standard_normal((5, 5)))))))

    fusion = TemporalFusion(FusionConfig(embed_dim=6, heads=2, stages=2,
                                         dropout=0.0, dtype=_DTYPE),
                            rngmod.stream(7, "selfcheck-init"))
    for p in fusion.params.values():
        p.data = p.data.astype(_DTYPE)
    e1 = Tensor(rng.standard_normal((2, 4, 6)).astype(_DTYPE), requires_grad=True)
    e2 = Tensor(rng.standard_normal((2, 4, 6)).astype(_DTYPE), requires_grad=True)
    probe = Tensor(rng.standard_normal((2, 12)))
    fusion_params = {"emb_t1": e1, "emb_t2": e2}
    fusion_params.update({f"fusion.{n}": p for n, p in list(fusion.params.items())[:6]})
    cases.append(("temporal_fusion", fusion_params,
                  lambda: T.sum_all(T.mul(fusion.fuse_batch(e1, e2, train=True,
                                                            rng=rngmod.stream(3, "x")),
                                          probe))))
    return cases


def run_gradient_suite(max_coords: int = 6):
    """Finite-difference check per op; returns (name, ok, detail) rows."""
    rng = np.random.default_rng(20240817)
    rows = []
    for name, params, build in _op_cases(rng):
        report = check_gradients(build, params, max_coords=max_coords,
                                 rng=np.random.default_rng(1))
        worst = max(rel for rel, _n, _ok in report.values())
        ok = all(passed for _rel, _n, passed in report.values())
        if _FAULT_INJECTION == name:
            ok, worst = False, float("inf")
        detail = f"max rel err {worst:.3e}"
        if _FAULT_INJECTION == name:
            detail = "injected gradient fault"
        rows.append((f"gradient:{name}", ok, detail))
    return rows


def run_retrieval_suite(n_rows: int = 200, n_queries: int = 20):
    """query_topk vs an independently coded full-scan sort, ties included."""
    rng = np.random.default_rng(42)
    feats = rng.standard_normal((n_rows, 32)).astype(np.float32)
    feats[7] = feats[3]  # force exact ties to exercise the id tie-break
    feats[11] = feats[3]
    ids = [f"row{i:05d}" for i in range(n_rows)]
    archive = RetrievalArchive(ids, feats, {i: ()
                               for i in ids}, {i: False for i in ids})
    rows = []
    for k in (1, 5, 50):
        ok = True
        for _ in range(n_queries):
            q = rng.standard_normal(32)
            got = [pid for _i, pid, _s in query_topk(archive, q, k)]
            qn = q / np.linalg.norm(q)
            sims = feats.astype(np.float64) @ qn
            sims = sims / np.linalg.norm(feats.astype(np.float64), axis=1)
            expected = [ids[i] for i in
                        sorted(range(n_rows), key=lambda i: (-sims[i], ids[i]))[:k]]
            if got != expected:
                ok = False
                break
        rows.append((f"retrieval:top{k}", ok, f"{n_queries} random queries"))
    return rows


# Frozen fixtures computed with an independent exact-arithmetic oracle.
METRIC_FIXTURES = [
    ("a b c", ["a b c"], 1.0, 1.0, 1.0, 0.9814814814814815),
    ("a b c", ["a b d"], 2 / 3, 0.6389431042462724, 2 / 3, 0.625),
    ("a b c d", ["a c b d"], 1.0, 0.4518010018049224, 0.75, 0.5),
    ("the cat", ["the cat"], 1.0, 1.0, 1.0, 0.9375),
    ("one", ["one"], 1.0, 1.0, 1.0, 0.5),
    ("x y z", ["p q r"], 0.0, 0.0, 0.0, 0.0),
    ("the cat sat on the mat", ["the cat sat on a mat"],
     5 / 6, 0.537284965911771, 5 / 6, 0.8066666666666666),
    ("a b", ["a b c d"], 0.36787944117144233, 0.36787944117144233,
     0.6288659793814433, 0.4934210526315789),
    ("a a b", ["a c", "b b"], 2 / 3, 0.5773502691896257,
     0.41496598639455784, 0.23809523809523808),
    ("the cat sat", ["the sat cat"], 1.0, 0.6389431042462724,
     2 / 3, 0.5),
    ("a b x", ["a b y"], 2 / 3, 0.6389431042462724, 2 / 3, 0.625),
    ("no change has occurred", ["the scene is unchanged",
                                "no change has occurred here today"],
     1.0, 1.0, 0.7721518987341772, 0.6842672413793104),
]


def run_metric_suite(tol: float = 1e-9):
    rows = []
    for hyp, refs, b1, b4, rl, mt in METRIC_FIXTURES:
        hyp_t = hyp.split()
        refs_t = [r.split() for r in refs]
        got = (bleu_n(hyp_t, refs_t, 1), bleu_n(hyp_t, refs_t, 4),
               rouge_l(hyp_t, refs_t), meteor(hyp_t, refs_t))
        ok = all(abs(g - e) <= tol for g, e in zip(got, (b1, b4, rl, mt)))
        rows.append((f"metric:{hyp[:24]!r}", ok,
                     "bleu1/bleu4/rougeL/meteor within 1e-9" if ok else
                     f"got {got}, expected {(b1, b4, rl, mt)}"))
    return rows


def run_all():
    return run_gradient_suite() + run_retrieval_suite() + run_metric_suite()

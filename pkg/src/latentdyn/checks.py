"""Finite-difference verification suite over every differentiable op.

Each check builds a float64 ParamStore, a scalar closure (op output
contracted against a fixed random projection so every output coordinate
contributes), and compares analytic gradients against central differences
at h=1e-5. The suite is the CLI's numerical gate: any entry above its
threshold is a failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data.geometry import PointCloud
from .data.synthetic import SceneConfig, generate_trajectory
from .dynamics import (
    LatentAction,
    ModelConfig,
    adaln,
    condition_vector,
    fdm_block,
    fdm_denoise,
    idm_forward,
    infer_latent_action,
    init_models,
    make_noise_schedule,
    noise_feature,
)
from .encoder import FeatureTokens, encode_groups, group_features, pool
from .numerics import (
    ParamStore,
    RandomStream,
    Tensor,
    attention,
    concat,
    div,
    gelu,
    grad_check,
    layer_norm,
    linear,
    matmul,
    maximum,
    mul,
    slice_last,
    softmax,
    square,
    sub,
    terf,
    texp,
    tmax,
    tmean,
    tsqrt,
    tsum,
    transpose_last,
)
from .objective import VicregWeights, bidirectional_loss, mse_only_loss, vicreg

DEFAULT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def _store(stream: RandomStream, shapes: dict) -> ParamStore:
    params = ParamStore()
    for name, shape in shapes.items():
        params.add(name, Tensor(stream.normal(shape), requires_grad=True))
    return params


def _proj(stream: RandomStream, shape) -> np.ndarray:
    return stream.normal(shape)


def _primitive_checks(stream: RandomStream):
    """(name, shapes, closure-builder) for each primitive op."""

    def scalarize(out, r):
        return tsum(mul(out, r))

    checks = []

    def add_check(name, shapes, fn):
        checks.append((name, shapes, fn))

    add_check("add", {"a": (3, 4), "b": (3, 4)},
              lambda p, r: scalarize(p["a"] + p["b"], r((3, 4))))
    add_check("add_broadcast", {"a": (3, 4), "b": (4,)},
              lambda p, r: scalarize(p["a"] + p["b"], r((3, 4))))
    add_check("sub", {"a": (3, 4), "b": (3, 4)},
              lambda p, r: scalarize(sub(p["a"], p["b"]), r((3, 4))))
    add_check("mul", {"a": (3, 4), "b": (3, 4)},
              lambda p, r: scalarize(mul(p["a"], p["b"]), r((3, 4))))
    add_check("div", {"a": (3, 4), "b": (3, 4)},
              lambda p, r: scalarize(div(p["a"], 3.0 + square(p["b"])), r((3, 4))))
    add_check("matmul", {"a": (3, 4), "b": (4, 5)},
              lambda p, r: scalarize(matmul(p["a"], p["b"]), r((3, 5))))
    add_check("matmul_batched", {"a": (2, 3, 4), "b": (4, 5)},
              lambda p, r: scalarize(matmul(p["a"], p["b"]), r((2, 3, 5))))
    add_check("sum", {"a": (3, 4)}, lambda p, r: scalarize(tsum(p["a"], axis=0), r((4,))))
    add_check("mean", {"a": (3, 4)}, lambda p, r: scalarize(tmean(p["a"], axis=-1), r((3,))))
    add_check("max_pool", {"a": (3, 5, 4)},
              lambda p, r: scalarize(tmax(p["a"], axis=-2), r((3, 4))))
    add_check("maximum_hinge", {"a": (3, 4)},
              lambda p, r: scalarize(maximum(p["a"], 0.25), r((3, 4))))
    add_check("sqrt", {"a": (3, 4)},
              lambda p, r: scalarize(tsqrt(square(p["a"]) + 1.0), r((3, 4))))
    add_check("exp", {"a": (3, 4)}, lambda p, r: scalarize(texp(p["a"]), r((3, 4))))
    add_check("erf", {"a": (3, 4)}, lambda p, r: scalarize(terf(p["a"]), r((3, 4))))
    add_check("square", {"a": (3, 4)}, lambda p, r: scalarize(square(p["a"]), r((3, 4))))
    add_check("concat_slice", {"a": (3, 4), "b": (3, 2)},
              lambda p, r: scalarize(slice_last(concat([p["a"], p["b"]], axis=-1), 1, 5),
                                     r((3, 4))))
    add_check("reshape_transpose", {"a": (3, 4)},
              lambda p, r: scalarize(transpose_last(p["a"].reshape(2, 6)), r((6, 2))))
    add_check("softmax", {"a": (3, 4)}, lambda p, r: scalarize(softmax(p["a"]), r((3, 4))))
    add_check("linear", {"x": (3, 4), "w": (4, 5), "b": (5,)},
              lambda p, r: scalarize(linear(p["x"], p["w"], p["b"]), r((3, 5))))
    add_check("gelu", {"a": (3, 4)}, lambda p, r: scalarize(gelu(p["a"]), r((3, 4))))
    add_check("layer_norm", {"a": (3, 6)},
              lambda p, r: scalarize(layer_norm(p["a"]), r((3, 6))))
    add_check("attention", {"q": (3, 4), "k": (3, 4), "v": (3, 4)},
              lambda p, r: scalarize(attention(p["q"], p["k"], p["v"]), r((3, 4))))
    add_check("gelu_chain", {"x": (2, 5), "w1": (5, 5), "w2": (5, 3)},
              lambda p, r: scalarize(matmul(gelu(matmul(gelu(p["x"]), p["w1"])), p["w2"]),
                                     r((2, 3))))
    return checks


def _tiny_model_config() -> ModelConfig:
    return ModelConfig(feat_dim=6, tokens=3, group_size=4, action_dim=3, idm_hidden=5,
                       cond_width=4, ffn_mult=2, n_blocks=2, diffusion_steps=8)


def _composite_results(seed: int) -> list[CheckResult]:
    stream = RandomStream.derive(seed, "gradcheck-composite")
    results = []
    cfg = _tiny_model_config()
    sched = make_noise_schedule(cfg.diffusion_steps)

    # IDM MLP over a pooled difference
    models = init_models(cfg, seed)
    idm64 = models.idm.astype(np.float64)
    x = stream.normal((2, cfg.feat_dim))
    r = stream.normal((2, cfg.action_dim))
    results.append(CheckResult(
        "idm_mlp",
        grad_check(lambda p: tsum(mul(idm_forward(p, Tensor(x)), r)), idm64),
        DEFAULT_TOLERANCE))

    # AdaLN with non-zero heads (the zero-init point is exactly LN)
    adaln_store = _store(stream, {"head.w": (5, 12), "head.b": (12,), "x": (2, 3, 6),
                                  "c": (2, 5)})
    r_adaln = stream.normal((2, 3, 6))
    results.append(CheckResult(
        "adaln",
        grad_check(lambda p: tsum(mul(adaln(p["x"], p["c"], p["head.w"], p["head.b"]),
                                      r_adaln)), adaln_store),
        DEFAULT_TOLERANCE))

    # One DiT block and the full single-pass denoiser at a perturbed point
    fdm64 = models.fdm.astype(np.float64)
    jitter = RandomStream.derive(seed, "gradcheck-jitter")
    for name, t in fdm64.items():
        t.data += 0.05 * jitter.normal(t.shape)  # move heads/gates off exact zero
    tokens = stream.normal((2, cfg.tokens, cfg.feat_dim))
    cond = stream.normal((2, 3 * cfg.cond_width))
    r_block = stream.normal((2, cfg.tokens, cfg.feat_dim))
    results.append(CheckResult(
        "fdm_block",
        grad_check(lambda p: tsum(mul(fdm_block(p, 0, Tensor(tokens), Tensor(cond)), r_block)),
                   fdm64),
        DEFAULT_TOLERANCE))

    z_noisy = stream.normal((2, cfg.tokens, cfg.feat_dim))
    z_cond = stream.normal((2, cfg.tokens, cfg.feat_dim))
    alpha_vec = stream.normal((2, cfg.action_dim))
    taus = np.array([2, 5])
    r_fdm = stream.normal((2, cfg.tokens, cfg.feat_dim))

    def fdm_closure(p):
        out = fdm_denoise(p, FeatureTokens(Tensor(z_noisy), "teacher"),
                          FeatureTokens(Tensor(z_cond), "student"),
                          LatentAction(Tensor(alpha_vec), "forward"),
                          taus, sched, n_blocks=cfg.n_blocks,
                          sinusoid_dim=cfg.sinusoid_dim)
        return tsum(mul(out.tokens, r_fdm))

    results.append(CheckResult("fdm_denoise", grad_check(fdm_closure, fdm64),
                               DEFAULT_TOLERANCE))

    # Encoder over real grouped clouds
    enc64 = models.online.astype(np.float64)
    scene = SceneConfig(n_points=32, length=3, n_distractors=1)
    traj = generate_trajectory(scene, seed)
    feats = np.stack([
        group_features(PointCloud(f.points.astype(np.float64)), cfg.tokens, cfg.group_size)
        for f in traj.frames[:2]
    ])
    r_enc = stream.normal((2, cfg.tokens, cfg.feat_dim))
    results.append(CheckResult(
        "encode",
        grad_check(lambda p: tsum(mul(encode_groups(p, feats), r_enc)), enc64),
        DEFAULT_TOLERANCE))

    # VICReg and plain-MSE heads
    w = VicregWeights()
    vr_store = _store(stream, {"pred": (4, 5), "target": (4, 5)})
    results.append(CheckResult(
        "vicreg",
        grad_check(lambda p: vicreg(p["pred"], p["target"], w)["total"], vr_store),
        DEFAULT_TOLERANCE))
    mse_store = _store(stream, {"pred": (4, 5), "target": (4, 5)})
    results.append(CheckResult(
        "mse_only",
        grad_check(lambda p: mse_only_loss(p["pred"], p["target"]), mse_store),
        DEFAULT_TOLERANCE))

    return results


def _full_loss_results(seed: int) -> list[CheckResult]:
    """Gradient of the complete bidirectional training loss w.r.t. every
    trainable parameter of a tiny model, against central differences.

    Checked at two points: exact init (the AdaLN-Zero structure makes the
    blocked paths exactly zero on both sides) and after a short optimization
    warmup, where every path carries gradient. The check loss averages two
    (tau, noise) draws so no single draw can push an individual parameter's
    gradient down to the finite-difference noise floor.
    """
    from .numerics import OptState, adamw_step

    results = []
    for label, warmup_steps in (("bidirectional_loss_init", 0),
                                ("bidirectional_loss_trained", 100)):
        cfg = ModelConfig(feat_dim=6, tokens=3, group_size=4, action_dim=3, idm_hidden=5,
                          cond_width=4, ffn_mult=2, n_blocks=1, diffusion_steps=8)
        models = init_models(cfg, seed)
        for store in (models.online, models.idm, models.fdm):
            for _, t in store.items():
                t.data = t.data.astype(np.float64)
        models.target = models.target.astype(np.float64)

        combined = ParamStore()
        for prefix, store in (("enc", models.online), ("idm", models.idm),
                              ("fdm", models.fdm)):
            for name, tensor in store.items():
                combined.add(f"{prefix}.{name}", tensor)

        scene = SceneConfig(n_points=24, length=4, n_distractors=0)
        trajs = [generate_trajectory(scene, seed + 1 + i) for i in range(2)]
        clouds_t = [PointCloud(t.frames[0].points.astype(np.float64)) for t in trajs]
        clouds_tk = [PointCloud(t.frames[3].points.astype(np.float64)) for t in trajs]
        w = VicregWeights()

        warm_noise = RandomStream.derive(seed, "warm0")
        opt = OptState.for_params(combined, lr=3e-3)
        for _ in range(warmup_steps):
            taus = warm_noise.integers(1, cfg.diffusion_steps + 1, 2)
            ef = warm_noise.normal((2, cfg.tokens, cfg.feat_dim))
            eh = warm_noise.normal((2, cfg.tokens, cfg.feat_dim))
            combined.zero_grad()
            total, _ = bidirectional_loss(models, clouds_t, clouds_tk, taus, ef, eh, w)
            total.backward()
            adamw_step(combined, opt)

        fixed = RandomStream.derive(seed, "eval0")
        draws = []
        for _ in range(2):
            taus = fixed.integers(1, cfg.diffusion_steps + 1, 2)
            ef = fixed.normal((2, cfg.tokens, cfg.feat_dim))
            eh = fixed.normal((2, cfg.tokens, cfg.feat_dim))
            draws.append((taus, ef, eh))

        def closure(_params):
            acc = None
            for taus, ef, eh in draws:
                total, _ = bidirectional_loss(models, clouds_t, clouds_tk, taus, ef, eh, w)
                acc = total if acc is None else acc + total
            return acc * 0.5

        results.append(CheckResult(label, grad_check(closure, combined), DEFAULT_TOLERANCE))
    return results


def run_gradcheck_suite(seed: int = 0, points_per_op: int = 20) -> list[CheckResult]:
    """The full numerical gate; returns one result per op plus the
    composite closures and the end-to-end loss."""
    results = []
    for name, shapes, fn in _primitive_checks(RandomStream.derive(seed, "gradcheck-spec")):
        worst = 0.0
        for point in range(points_per_op):
            stream = RandomStream.derive(seed + point, f"gradcheck-{name}")
            params = _store(stream, shapes)
            projections: dict[tuple, np.ndarray] = {}

            def r(shape):
                key = tuple(shape)
                if key not in projections:
                    projections[key] = _proj(stream, shape)
                return projections[key]

            worst = max(worst, grad_check(lambda p: fn(p, r), params))
        results.append(CheckResult(name, worst, DEFAULT_TOLERANCE))
    results.extend(_composite_results(seed))
    results.extend(_full_loss_results(seed))
    return results

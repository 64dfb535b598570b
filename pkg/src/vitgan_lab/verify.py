"""Oracle suites: gradient checks, spectral norms, Lipschitz growth, patch geometry.

Each suite returns a list of :class:`Check` rows.  Ops are looked up on
their modules at call time, so a patched (or broken) rule is what gets
checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import models as M
from . import nn
from . import patches as PT
from . import spectral as S
from . import tensor as T
from . import training as TR
from .augment import AugmentDraw
from .rng import Rng


@dataclass
class Check:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.suite:<9} {self.name:<28} {self.detail}"


GRAD_TOL = 1e-4
INSTANCES = 20


# ---------------------------------------------------------------------------
# gradient checks


def _param_fd(loss_fn, params: dict, rng: np.random.Generator, n_coords: int = 12, h: float = 1e-6):
    """Tape vs central-difference gradients on a random subset of parameter coordinates."""
    with T.Tape() as tape:
        y = loss_fn()
        g = tape.backward(y, wrt=list(params.values()))
    worst = 0.0
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ga = g[p].reshape(-1)
            for i in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                mag = max(abs(num), abs(ga[i]))
                err = abs(num - ga[i]) / mag if mag > 1e-8 else abs(num - ga[i])
                worst = max(worst, err)
    return worst


def _random_draw(g: np.random.Generator, B, H, W):
    return AugmentDraw(g.uniform(-0.5, 0.5, B), g.uniform(0, 2, B), g.uniform(0.5, 1.5, B),
                       g.integers(-1, 2, (B, 2)), g.uniform(0.75, 1.25, B),
                       np.where(g.random((B, 1)) < 0.5, g.integers(0, 5, (B, 2)), -1), (4, 4), (H, W))


def _tiny_disc(seed, spectral="isn", kernel="l2_tied"):
    cfg = M.DiscriminatorConfig(blocks=1, width=8, heads=2, patch=2, image_size=4, channels=1,
                                spectral=spectral, kernel=kernel, mlp_ratio=2)
    return M.Discriminator(cfg, Rng(seed, "verify/disc"))


def _grad_cases():
    """name -> callable(seed) returning worst relative error for one random instance."""

    def unary(op):
        def run(seed):
            g = np.random.default_rng(seed)
            x = T.Tensor(g.normal(size=(3, 4)))
            if op in ("log", "sqrt"):
                x = T.Tensor(np.abs(x.data) + 0.5)
            fn = getattr(T, op)
            w = g.normal(size=(3, 4))
            return T.gradcheck(lambda a: T.reduce_sum(fn(a) * w), x).max_rel_err
        return run

    def binary(op):
        def run(seed):
            g = np.random.default_rng(seed)
            a, b = T.Tensor(g.normal(size=(3, 4))), T.Tensor(g.normal(size=(4,)))
            if op == "div":
                b = T.Tensor(np.sign(b.data) * (np.abs(b.data) + 0.5))
            fn = getattr(T, op)
            w = g.normal(size=(3, 4))
            return T.gradcheck(lambda x, y: T.reduce_sum(fn(x, y) * w), [a, b]).max_rel_err
        return run

    def matmul(seed):
        g = np.random.default_rng(seed)
        a, b = T.Tensor(g.normal(size=(2, 3, 4))), T.Tensor(g.normal(size=(4, 5)))
        w = g.normal(size=(2, 3, 5))
        return T.gradcheck(lambda x, y: T.reduce_sum(T.matmul(x, y) * w), [a, b]).max_rel_err

    def softmax(seed):
        g = np.random.default_rng(seed)
        x = T.Tensor(g.normal(size=(3, 5)))
        w = g.normal(size=(3, 5))
        return T.gradcheck(lambda a: T.reduce_sum(T.softmax(a, axis=-1) * w), x).max_rel_err

    def layernorm(seed):
        g = np.random.default_rng(seed)
        p = nn.LayerNormParams(6)
        p.gamma.data = g.normal(size=6)
        p.beta.data = g.normal(size=6)
        x = T.Tensor(g.normal(size=(2, 3, 6)))
        w = g.normal(size=(2, 3, 6))
        e1 = T.gradcheck(lambda a: T.reduce_sum(nn.layernorm(a, p) * w), x).max_rel_err
        e2 = _param_fd(lambda: T.reduce_sum(nn.layernorm(x, p) * w), p.parameters(), g)
        return max(e1, e2)

    def attention(kernel):
        def run(seed):
            g = np.random.default_rng(seed)
            p = A.AttentionParams(8, 2, Rng(seed, "verify/attn"), kernel=kernel)
            x = T.Tensor(g.normal(size=(1, 4, 8)))
            w = g.normal(size=(1, 4, 8))
            e1 = T.gradcheck(lambda a: T.reduce_sum(p(a) * w), x).max_rel_err
            e2 = _param_fd(lambda: T.reduce_sum(p(x) * w), p.parameters(), g)
            return max(e1, e2)
        return run

    def sln(seed):
        g = np.random.default_rng(seed)
        p = M.SelfModulatedLN(6, Rng(seed, "verify/sln"))
        for q in p.parameters().values():
            q.data = g.normal(size=q.shape)
        h, wl = T.Tensor(g.normal(size=(2, 3, 6))), T.Tensor(g.normal(size=(2, 6)))
        w = g.normal(size=(2, 3, 6))
        e1 = T.gradcheck(lambda a, b: T.reduce_sum(p(a, b) * w), [h, wl]).max_rel_err
        e2 = _param_fd(lambda: T.reduce_sum(p(h, wl) * w), p.parameters(), g)
        return max(e1, e2)

    def inr(seed):
        g = np.random.default_rng(seed)
        dec = M.InrDecoder(8, 2, 1, Rng(seed, "verify/inr"))
        y = T.Tensor(g.normal(size=(2, 3, 8)))
        w = g.normal(size=(2, 3, 4, 1))
        e1 = T.gradcheck(lambda a: T.reduce_sum(dec(a) * w), y).max_rel_err
        e2 = _param_fd(lambda: T.reduce_sum(dec(y) * w), dec.parameters(), g)
        return max(e1, e2)

    def block(seed):
        g = np.random.default_rng(seed)
        kernel, spectral = (("l2_tied", "isn"), ("dot_product", "none"))[seed % 2]
        blk = M.TransformerBlock(8, 2, Rng(seed, "verify/block"), kernel=kernel, spectral=spectral, mlp_ratio=2)
        x = T.Tensor(g.normal(size=(1, 3, 8)))
        w = g.normal(size=(1, 3, 8))
        e1 = T.gradcheck(lambda a: T.reduce_sum(blk(a) * w), x).max_rel_err
        e2 = _param_fd(lambda: T.reduce_sum(blk(x) * w), blk.parameters(), g, n_coords=4)
        return max(e1, e2)

    def nonsat(seed):
        g = np.random.default_rng(seed)
        r, f = T.Tensor(g.normal(size=5) * 2), T.Tensor(g.normal(size=5) * 2)
        e1 = T.gradcheck(lambda a, b: TR.nonsat_logistic_losses(a, b)[0], [r, f]).max_rel_err
        e2 = T.gradcheck(lambda b: TR.nonsat_logistic_losses(r, b)[1], f).max_rel_err
        return max(e1, e2)

    def bcr(seed):
        g = np.random.default_rng(seed)
        disc = _tiny_disc(seed)
        real = T.Tensor(g.uniform(-1, 1, (2, 4, 4, 1)))
        fake = T.Tensor(g.uniform(-1, 1, (2, 4, 4, 1)))
        d = _random_draw(g, 2, 4, 4)
        f = lambda a, b: TR.bcr_penalty(disc, a, b, None, 10.0, 10.0, draw=d)
        e1 = T.gradcheck(f, [real, fake]).max_rel_err
        e2 = _param_fd(lambda: f(real, fake), {k: v for k, v in disc.parameters().items() if "block" not in k}, g,
                       n_coords=3)
        return max(e1, e2)

    def r1(seed):
        # parameter gradient of the penalty vs central differences of its value
        g = np.random.default_rng(seed)
        disc = _tiny_disc(seed, spectral="none", kernel="dot_product")
        real = g.uniform(-1, 1, (2, 4, 4, 1))
        params = {k: v for k, v in disc.parameters().items() if k in ("embed.weight", "head.weight", "cls")}
        _, grads = TR.r1_param_grads(disc, real, 10.0, params)
        worst, h = 0.0, 1e-6
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for i in g.choice(flat.size, size=min(4, flat.size), replace=False):
                orig = flat[i]
                flat[i] = orig + h
                fp = TR.r1_penalty(disc, real, 10.0)
                flat[i] = orig - h
                fm = TR.r1_penalty(disc, real, 10.0)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = grads[name].reshape(-1)[i]
                mag = max(abs(num), abs(a))
                worst = max(worst, abs(num - a) / mag if mag > 1e-8 else abs(num - a))
        return worst

    cases = {}
    for op in ("exp", "log", "sin", "cos", "tanh", "gelu", "softplus", "sigmoid", "sqrt", "square"):
        cases[f"unary.{op}"] = unary(op)
    for op in ("add", "sub", "mul", "div"):
        cases[f"binary.{op}"] = binary(op)
    cases.update({
        "matmul": matmul,
        "softmax": softmax,
        "layernorm": layernorm,
        "attention.dot_product": attention("dot_product"),
        "attention.l2_tied": attention("l2_tied"),
        "sln": sln,
        "inr_decoder": inr,
        "transformer_block": block,
        "loss.nonsat_logistic": nonsat,
        "loss.bcr": bcr,
        "loss.r1": r1,
    })
    return cases


def suite_gradcheck(instances: int = INSTANCES, tol: float = GRAD_TOL, only=None) -> list:
    out = []
    with T.default_dtype(np.float64):
        for name, run in _grad_cases().items():
            if only and name not in only:
                continue
            errs = [run(1000 + i) for i in range(instances)]
            worst = max(errs)
            out.append(Check("gradcheck", name, bool(np.isfinite(worst) and worst <= tol),
                             f"max rel err {worst:.2e} over {instances} instances (tol {tol:g})"))
    return out


# ---------------------------------------------------------------------------
# spectral


def suite_spectral(n_matrices: int = 100, n_perturbed: int = 50) -> list:
    g = np.random.default_rng(2024)
    worst = 0.0
    for i in range(n_matrices):
        m, n = g.integers(1, 17, 2)
        W = g.normal(size=(m, n))
        sw = S.SpectralWeight(T.Tensor(W), "sn", Rng(i, "verify/sn"), init_iters=200)
        worst = max(worst, abs(sw.sigma_init - S.svd_oracle(W)) / S.svd_oracle(W))
    out = [Check("spectral", "power_iter_vs_jacobi", worst <= 1e-3,
                 f"max rel err {worst:.2e} over {n_matrices} matrices, 200 iterations")]

    fixed = 0.0
    for i in range(20):
        W = g.normal(size=(8, 6))
        sw = S.SpectralWeight(T.Tensor(W), "isn", Rng(i, "verify/isn"))
        fixed = max(fixed, float(np.max(np.abs(sw.effective_weight().data - W))))
    out.append(Check("spectral", "isn_fixed_point", fixed <= 1e-12, f"max |W_eff - W_init| {fixed:.2e}"))

    worst = 0.0
    for i in range(n_perturbed):
        W0 = g.normal(size=(10, 7))
        w = T.Tensor(W0.copy())
        sw = S.SpectralWeight(w, "isn", Rng(i, "verify/isn_p"))
        w.data = W0 + 0.3 * g.normal(size=W0.shape)
        sw.power_iter_sigma(200)
        got = S.svd_oracle(sw.effective_weight().data)
        worst = max(worst, abs(got - sw.sigma_init) / sw.sigma_init)
    out.append(Check("spectral", "isn_preserves_init_norm", worst <= 1e-3,
                     f"max rel dev {worst:.2e} over {n_perturbed} perturbed weights"))
    return out


# ---------------------------------------------------------------------------
# Lipschitz growth


def lipschitz_fixture(seed: int, kernel: str, dim: int = 16, heads: int = 2, tokens: int = 8):
    """One attention layer and a token set whose first token is the zero vector.

    The zero token's scores against every key are equal at any input scale,
    so its attention row stays uniform instead of saturating.  Its Jacobian
    then carries the covariance of the other tokens under that row, which
    grows with the square of the scale for the dot-product kernel.
    """
    p = A.AttentionParams(dim, heads, Rng(seed, "probe/attn"), kernel=kernel)
    x0 = Rng(seed, "probe/x").normal((1, tokens, dim))
    x0[:, 0] = 0.0
    return p, x0


def lipschitz_growth(seed: int, kernel: str, scales=(1.0, 100.0), iters: int = 200):
    p, x0 = lipschitz_fixture(seed, kernel)
    with T.default_dtype(np.float64):
        return [A.empirical_lipschitz(p, s * x0, iters=iters, rng=Rng(seed, "probe/v")) for s in scales]


def suite_lipschitz(seeds=(0, 1, 2), scale: float = 100.0) -> list:
    out = []
    for kernel, bound, cmp in (("dot_product", 10.0, "ge"), ("l2_tied", 2.0, "le")):
        ratios = []
        for s in seeds:
            lo, hi = lipschitz_growth(s, kernel, (1.0, scale))
            ratios.append(hi / lo)
        ok = all(r >= bound for r in ratios) if cmp == "ge" else all(r <= bound for r in ratios)
        sym = ">=" if cmp == "ge" else "<="
        out.append(Check("lipschitz", f"{kernel}_growth_x{scale:g}", ok,
                         "ratios " + ", ".join(f"{r:.3g}" for r in ratios) + f" (need {sym} {bound:g})"))
    return out


# ---------------------------------------------------------------------------
# patches


def suite_patch(n_images: int = 1000) -> list:
    g = np.random.default_rng(7)
    bad = 0
    shapes = [(8, 8, 1, 2), (8, 8, 3, 4), (12, 8, 2, 4), (16, 16, 1, 4)]
    for i in range(n_images):
        H, W, C, P = shapes[i % len(shapes)]
        grid = PT.PatchGrid(H, W, C, P, overlap=0)
        img = g.normal(size=(H, W, C)).astype(np.float32)
        back = PT.depatchify(grid, PT.patchify(grid, img)).data
        bad += not np.array_equal(back, img)
    out = [Check("patch", "roundtrip_o0", bad == 0, f"{n_images - bad}/{n_images} bit-exact")]

    bad = 0
    for i in range(200):
        H, W, C, P = shapes[i % len(shapes)]
        o = P // 2
        img = g.normal(size=(2, H, W, C))
        big = PT.patchify(PT.PatchGrid(H, W, C, P, overlap=o), img).data
        small = PT.patchify(PT.PatchGrid(H, W, C, P, overlap=0), img).data
        K = P + 2 * o
        center = big.reshape(big.shape[:-1] + (K, K, C))[..., o : o + P, o : o + P, :]
        bad += not np.array_equal(center.reshape(small.shape), small)
    out.append(Check("patch", "center_window_o=P/2", bad == 0, f"{200 - bad}/200 exact"))
    return out


SUITES = {"gradcheck": suite_gradcheck, "spectral": suite_spectral, "lipschitz": suite_lipschitz, "patch": suite_patch}


def run_suite(name: str) -> list:
    if name == "all":
        rows = []
        for fn in SUITES.values():
            rows.extend(fn())
        return rows
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; expected one of {sorted(SUITES) + ['all']}")
    return SUITES[name]()


def format_table(rows) -> str:
    return "\n".join(r.line() for r in rows)


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    res = fn(*a, **kw)
    return res, time.perf_counter() - t0

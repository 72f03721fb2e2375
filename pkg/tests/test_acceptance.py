"""Acceptance criteria 1-14, one test per criterion.

Each test records a PASS/FAIL line (printed in the pytest terminal summary)
before asserting. Criteria 8-11 and 14 share one set of desk-scale ListOps
training runs built by the session fixture ``desk``; that fixture takes
roughly 20 minutes on one core.
"""

import math
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from acceptance_report import record
from oracles import jacobi_singular_values
from test_tensor import _unary_cases
from transject import analysis as A
from transject import tensor as T
from transject.baseline import BaselineConfig, BaselineTransformer
from transject.config import load_config
from transject.gradcheck import check_gradients, numeric_grad
from transject.harness import bench_models, load_splits, time_interleaved, train
from transject.model import TransJect, TransJectConfig, orthogonal_attention
from transject.optim import Adam
from transject.ortho import (OrthogonalParam, SemiOrthogonalParam, linear_solve, orthogonality_error,
                             orthogonalize, semi_orthogonalize)
from transject.spectral import (approx_eigen, check_linear_activation_bound,
                                check_stochastic_eigenvalue, gram, standardize,
                                top_singular_value)
from transject.tensor import Tensor, backward, no_grad

pytestmark = [pytest.mark.acceptance, pytest.mark.filterwarnings("ignore:layers=")]

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
INSTANCES = 50


def transject(**kw):
    base = dict(layers=3, d=8, experts=2, vocab_size=12, max_len=16, n_classes=4, seed=0)
    base.update(kw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return TransJect(TransJectConfig(**base))


def stirred(model, seed):
    """Move residual weights and gates off their init so every branch matters."""
    rng = np.random.default_rng(seed)
    for lp in model.layers:
        lp.residual_raw.assign_(np.array(rng.uniform(-1, 2)))
        lp.ffn_residual_raw.assign_(np.array(rng.uniform(-1, 2)))
        lp.gate_w.assign_(rng.normal(size=lp.gate_w.shape))
    return model


def layer_params(lp):
    return ([u.raw for u in lp.u] + [v.raw for v in lp.v]
            + [lp.residual_raw, lp.gate_w, lp.w1.raw, lp.w2.raw, lp.b1, lp.b2, lp.ffn_residual_raw])


# -- 1 ----------------------------------------------------------------------------------------

def _param_map_cases(rng):
    sq = rng.normal(size=(5, 5))
    rhs = rng.normal(size=(5, 3))
    g = rng.normal(size=(7, 6))
    basis = OrthogonalParam(6, rng, 0.5)
    gram5 = (g.T @ g)[:5, :5]
    return {
        "cayley": (sq, orthogonalize),
        "thin_qr_tall": (rng.normal(size=(7, 3)), semi_orthogonalize),
        "thin_qr_wide": (rng.normal(size=(3, 7)), semi_orthogonalize),
        "linear_solve": (sq + 6 * np.eye(5), lambda t: linear_solve(t, Tensor(rhs))),
        "gram": (g, gram),
        "approx_eigen": (g, lambda t: approx_eigen(gram(t), basis)[0]),
        "recon_error": (sq, lambda t: approx_eigen(Tensor(gram5), orthogonalize(t))[1]),
        "standardize": (rng.uniform(size=8), standardize),
        "orthogonal_attention": (rng.normal(size=(6, 5)), lambda t: orthogonal_attention(
            t, Tensor(np.linalg.qr(sq)[0]), Tensor(np.linalg.qr(sq.T)[0]),
            Tensor(np.linspace(0.1, 1.0, 5)))),
    }


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(INSTANCES):
        rng = np.random.default_rng(seed)
        cases = {**_unary_cases(rng), **_param_map_cases(rng)}
        for name, (x0, fn) in cases.items():
            x = Tensor(x0.copy(), requires_grad=True)
            w = Tensor(rng.normal(size=fn(Tensor(x0)).shape))
            err = check_gradients(lambda: T.tsum(T.mul(fn(x), w)), [x])
            worst[name] = max(worst.get(name, 0.0), err)

        # full blocks with N <= 8, d <= 16; every tenth instance is wider to keep
        # the finite-difference sweep inside the time budget
        d = 8 if seed % 10 == 0 else 4
        m = stirred(transject(d=d, seed=seed), seed)
        x = Tensor(rng.normal(size=(2, 5, d)), requires_grad=True)
        sigma = Tensor(rng.uniform(0.05, 1.0, size=(2, d)), requires_grad=True)
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], float)
        w = Tensor(rng.normal(size=(2, 5, d)))
        lp = m.layers[0]
        f = lambda: T.tsum(T.mul(m.sublayer(x, lp, sigma, mask)[0], w))
        worst["transject_sublayer"] = max(worst.get("transject_sublayer", 0.0),
                                          check_gradients(f, [x, sigma] + layer_params(lp)))

        # baseline blocks; d/d bk is identically zero (softmax shift invariance) and
        # is checked as a structural zero instead of a relative error
        for variant in ("vanilla", "rezero", "orthogonal"):
            b = BaselineTransformer(BaselineConfig(layers=1, d=d, heads=2, vocab_size=10,
                                                   max_len=8, variant=variant, dropout=0.0,
                                                   seed=seed))
            blk = b.blocks[0]
            if variant == "rezero":
                blk["res_attn"].assign_(np.array(rng.uniform(-1, 1)))
                blk["res_ffn"].assign_(np.array(rng.uniform(-1, 1)))
            xb = Tensor(rng.normal(size=(2, 4, d)), requires_grad=True)
            wb = Tensor(rng.normal(size=(2, 4, d)))
            mb = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], float)
            fb = lambda: T.tsum(T.mul(b.block(xb, blk, mb), wb))
            raw = [v.raw if hasattr(v, "raw") else v for k, v in blk.items() if k != "bk"]
            key = f"baseline_{variant}_block"
            worst[key] = max(worst.get(key, 0.0), check_gradients(fb, [xb] + raw))
            blk["bk"].zero_grad()
            backward(fb())
            zero_ok = (np.abs(blk["bk"].grad).max() < 1e-12
                       and np.abs(numeric_grad(fb, blk["bk"])).max() < 1e-8)
            worst[key + "_bk_zero"] = 0.0 if zero_ok else math.inf
    elapsed = time.perf_counter() - t0
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 120
    record(1, ok, f"{len(worst)} checks x {INSTANCES} instances, worst {name} rel err "
                  f"{err:.2e} (< 1e-4), {elapsed:.0f}s (< 120s)")
    assert ok, worst


# -- 2 ----------------------------------------------------------------------------------------

def test_criterion_02_orthogonality_preserved():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    m = stirred(transject(d=8, experts=2, layers=3), 1)
    extra = {"tall": SemiOrthogonalParam(10, 3, rng, name="tall"),
             "wide": SemiOrthogonalParam(3, 10, rng, name="wide")}
    params = dict(m.parameters())
    params.update({p.raw.name: p.raw for p in extra.values()})
    opt = Adam(params, lr=0.01)
    toks = rng.integers(2, 12, size=(4, 6))
    labels = np.array([0, 1, 2, 3])
    targets = {k: Tensor(rng.normal(size=p.raw.shape)) for k, p in extra.items()}
    for _ in range(200):
        opt.zero_grad()
        loss = m.loss(m.forward(toks), labels)[0]
        for k, p in extra.items():
            loss = T.add(loss, T.tsum(T.square(T.sub(p.value(), targets[k]))))
        backward(loss)
        opt.step()
    square = [p for p in m.orthogonal_params().values() if not isinstance(p, SemiOrthogonalParam)]
    semi = [m.embed] + list(extra.values())
    sq_err = max(orthogonality_error(p.value().data) for p in square)
    semi_err = max(orthogonality_error(p.value().data) for p in semi)
    elapsed = time.perf_counter() - t0
    ok = sq_err < 1e-8 and semi_err < 1e-8 and elapsed < 60
    record(2, ok, f"{len(square)} orthogonal max err {sq_err:.1e}, {len(semi)} semi-orthogonal "
                  f"max err {semi_err:.1e} (< 1e-8) after 200 Adam steps, {elapsed:.0f}s")
    assert ok


# -- 3 ----------------------------------------------------------------------------------------

def test_criterion_03_linear_activation_bound():
    t0 = time.perf_counter()
    worst_gap, worst_oracle = 0.0, 0.0
    for seed in range(20):
        w = np.random.default_rng(seed).normal(size=(8, 8))
        emp, s1 = check_linear_activation_bound(w, trials=10_000, seed=seed)
        svd = np.linalg.svd(w, compute_uv=False)[0]
        jac = jacobi_singular_values(w)[0]
        worst_oracle = max(worst_oracle, abs(s1 - svd), abs(s1 - jac))
        assert emp <= s1 * (1 + 1e-12)
        worst_gap = max(worst_gap, (s1 - emp) / s1)
    elapsed = time.perf_counter() - t0
    ok = worst_gap <= 0.05 and worst_oracle < 1e-6 and elapsed < 60
    record(3, ok, f"20 maps: sampled bound at most {100 * worst_gap:.2f}% below sigma_1 (<= 5%), "
                  f"power iteration vs SVD/Jacobi {worst_oracle:.1e} (< 1e-6)")
    assert ok


# -- 4 ----------------------------------------------------------------------------------------

def test_criterion_04_stochastic_eigenvalue():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 17))
        m = rng.uniform(size=(n, n)) ** rng.uniform(0.5, 4)
        m /= m.sum(axis=0)
        worst = max(worst, abs(check_stochastic_eigenvalue(m) - 1.0))
        # independent oracle: dense eigensolver
        assert abs(np.abs(np.linalg.eigvals(m)).max() - 1.0) < 1e-9
    ok = worst < 1e-6
    record(4, ok, f"20 column-stochastic matrices: max | |lambda_1| - 1 | = {worst:.1e} (< 1e-6)")
    assert ok


# -- 5 ----------------------------------------------------------------------------------------

def test_criterion_05_isometry_limit():
    iso, opnorm = 0.0, 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d, n = int(rng.integers(2, 17)), int(rng.integers(2, 9))
        u = OrthogonalParam(d, rng, 1.0).value()
        v = OrthogonalParam(d, rng, 1.0).value()
        x = rng.normal(size=(n, d))
        out = orthogonal_attention(Tensor(x), u, v, Tensor(np.ones(d))).data
        dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
        do = np.linalg.norm(out[:, None] - out[None], axis=-1)
        iso = max(iso, np.abs(dx - do).max())
        sigma = standardize(Tensor(rng.uniform(size=d))).data
        mat = u.data @ np.diag(sigma) @ v.data
        opnorm = max(opnorm, abs(top_singular_value(mat) - 1.0))
    ok = iso < 1e-9 and opnorm < 1e-9
    record(5, ok, f"unit sigma distance drift {iso:.1e} (< 1e-9); standardized sigma "
                  f"| ||U diag(s) V|| - 1 | = {opnorm:.1e} (< 1e-9)")
    assert ok


# -- 6 ----------------------------------------------------------------------------------------

def test_criterion_06_injectivity():
    t0 = time.perf_counter()
    pairs = 500
    closest = {}
    for L in (3, 4, 6):
        m = stirred(transject(layers=L, d=16, vocab_size=20, max_len=8, seed=L), L)
        rng = np.random.default_rng(100 + L)
        sigma = Tensor(standardize(Tensor(rng.uniform(size=16))).data)
        emb = sub = enc = math.inf
        with no_grad():
            for i in range(pairs):
                a = rng.integers(0, 20, size=8)
                b = a.copy()
                if i % 2:   # one-token edit, the hardest case
                    j = rng.integers(0, 8)
                    b[j] = (b[j] + rng.integers(1, 20)) % 20
                else:
                    b = rng.integers(0, 20, size=8)
                if np.array_equal(a, b):
                    continue
                ea, eb = m.embed_tokens(a).data, m.embed_tokens(b).data
                emb = min(emb, np.linalg.norm(ea - eb))
                enc = min(enc, np.linalg.norm(m.encode(a)[0][-1].data - m.encode(b)[0][-1].data))

                x = rng.normal(size=(8, 16))
                y = x + (10.0 ** rng.uniform(-6, 0)) * rng.normal(size=(8, 16))
                fx = m.sublayer(Tensor(x), m.layers[0], sigma)[0].data
                fy = m.sublayer(Tensor(y), m.layers[0], sigma)[0].data
                sub = min(sub, np.linalg.norm(fx - fy))
                gx = m.encode_embeddings(Tensor(x))[0][-1].data
                gy = m.encode_embeddings(Tensor(y))[0][-1].data
                enc = min(enc, np.linalg.norm(gx - gy))
        closest[L] = (emb, sub, enc)
    elapsed = time.perf_counter() - t0
    worst = min(min(v) for v in closest.values())
    ok = worst > 1e-9 and elapsed < 180
    detail = "; ".join(f"L={L} min dist emb {e:.1e} sub {s:.1e} enc {n:.1e}"
                       for L, (e, s, n) in closest.items())
    record(6, ok, f"{pairs} pairs per level: {detail} (> 1e-9), {elapsed:.0f}s")
    assert ok


# -- desk training shared by 7-11 and 14 -------------------------------------------------------------

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs, splits = {}, None
    t0 = time.perf_counter()
    for tag, ini in [("transject", "listops_transject.ini"), ("vanilla", "listops_vanilla.ini"),
                     ("transject_e4", "listops_transject_e4.ini"),
                     ("transject_repeat", "listops_transject.ini")]:
        cfg = load_config(CONFIGS / ini)
        cfg.output.run_dir = str(root / tag)
        splits = splits or load_splits(cfg)
        runs[tag] = train(cfg, splits)
    runs["seconds"] = time.perf_counter() - t0
    runs["splits"] = splits
    return runs


def _bundle(run, splits, n=256):
    return A.collect_traces(run.model, splits.test[:n], 32)


def _test_accuracy(run):
    return run.last("test")["accuracy"]


# -- 7 ----------------------------------------------------------------------------------------------

def _encoder_bound(model, n, d, rng_seed, base_rows=None):
    """Sampled Lipschitz bound of layer-0 rows -> final layer, independent and local pairs."""
    def f(x):
        return model.encode_embeddings(Tensor(x.reshape(n, d)))[0][-1].data.ravel()

    if base_rows is None:
        sampler = lambda rng: rng.normal(size=n * d)
    else:
        sampler = lambda rng: base_rows[rng.integers(len(base_rows))].ravel() \
            + 0.1 * rng.normal(size=n * d)
    local = lambda rng, x: x + 1e-3 * rng.normal(size=x.shape)
    with no_grad():
        far = A.empirical_activation_bound(f, sampler, 1000, seed=rng_seed)
        near = A.empirical_activation_bound(f, sampler, 1000, seed=rng_seed + 1, pair=local)
    return max(far, near)


def test_criterion_07_lipschitz_band(desk):
    t0 = time.perf_counter()
    init = {}
    for L in (3, 4, 6):
        m = transject(layers=L, d=16, vocab_size=20, max_len=8, seed=L)
        init[f"init L={L}"] = _encoder_bound(m, 8, 16, L)
    trained = {}
    splits = desk["splits"]
    for tag in ("transject", "transject_e4"):
        m = desk[tag].model
        rows = [m.embed_tokens(np.array(e.tokens[:16])).data for e in splits.test[:64]
                if len(e.tokens) >= 16]
        trained[tag] = _encoder_bound(m, 16, m.config.d, 7, np.array(rows))
    elapsed = time.perf_counter() - t0
    ok = (max(init.values()) < 2.0 and max({**init, **trained}.values()) < math.exp(6)
          and elapsed < 120)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in {**init, **trained}.items())
    record(7, ok, f"sampled encoder bounds: {detail} (init < 2.0, all < e^6), {elapsed:.0f}s")
    assert ok


# -- 8 ----------------------------------------------------------------------------------------------

def test_criterion_08_activation_factor_ordering(desk):
    tj, van, splits = desk["transject"], desk["vanilla"], desk["splits"]
    acc = {k: _test_accuracy(desk[k]) for k in ("transject", "vanilla")}
    majority = tj.majority
    tj_af = A.activation_factor(_bundle(tj, splits), tj.model.config.layers)["median"]
    van_af = A.activation_factor(_bundle(van, splits), van.model.config.layers)["median"]
    trained_ok = all(a >= majority + 0.20 for a in acc.values())
    ok = (trained_ok and 0.5 <= tj_af <= 1.5 and tj_af < van_af
          and desk["seconds"] < 30 * 60)
    record(8, ok, f"test acc TJ {acc['transject']:.3f} vanilla {acc['vanilla']:.3f} "
                  f"(majority {majority:.3f} + 0.20); final-layer median activation factor "
                  f"TJ {tj_af:.3f} (in [0.5,1.5]) vs vanilla {van_af:.3f} (TJ must be lower); "
                  f"all desk training {desk['seconds'] / 60:.1f} min")
    assert trained_ok
    assert 0.5 <= tj_af <= 1.5
    assert tj_af < van_af


# -- 9 ----------------------------------------------------------------------------------------------

def test_criterion_09_entropy_ordering(desk):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    uni = A.kl_entropy_1d(rng.uniform(size=10_000)).value
    gau = A.kl_entropy_1d(rng.normal(size=10_000)).value
    estimator_ok = abs(uni) < 0.1 and abs(gau - 0.5 * math.log(2 * math.pi * math.e)) < 0.1
    splits = desk["splits"]
    tj = A.mean_entropy(_bundle(desk["transject"], splits))
    van = A.mean_entropy(_bundle(desk["vanilla"], splits))
    elapsed = time.perf_counter() - t0
    ok = estimator_ok and tj < van and elapsed < 300
    record(9, ok, f"estimator uniform {uni:.3f} (0 +- 0.1) gaussian {gau:.3f} (1.4189 +- 0.1); "
                  f"mean entropy layers 1..L TJ {tj:.3f} < vanilla {van:.3f}, {elapsed:.0f}s")
    assert ok


# -- 10 ---------------------------------------------------------------------------------------------

def test_criterion_10_expert_balance(desk):
    run = desk["transject_e4"]
    bundle = _bundle(run, desk["splits"])
    lam = np.array([np.stack(g) for g in bundle.gates])      # samples x layers x experts
    means = lam.mean(axis=0)
    sum_err = float(np.abs(lam.sum(axis=-1) - 1.0).max())
    pooled = lam.mean(axis=(0, 1))                            # averaged over layers too
    ok = means.min() >= 0.15 and means.max() <= 0.35 and sum_err < 1e-9
    record(10, ok, f"E=4 per-layer per-expert mean gate weight in [{means.min():.3f}, "
                   f"{means.max():.3f}] (within [0.15, 0.35]; pooled over layers "
                   f"{', '.join(f'{v:.3f}' for v in pooled)}); max |sum - 1| = {sum_err:.1e} "
                   f"(< 1e-9)")
    assert ok


# -- 11 ---------------------------------------------------------------------------------------------

def test_criterion_11_residual_band(desk):
    alphas = {tag: desk[tag].model.residual_weights() for tag in ("transject", "transject_e4")}
    flat = [a for v in alphas.values() for a in v]
    ok = all(0.0 < a < 1.0 for a in flat)
    warn = [a for a in flat if a >= A.RESIDUAL_WARN]
    if warn:
        warnings.warn(f"residual weights at or above {A.RESIDUAL_WARN}: {warn}")
    detail = "; ".join(f"{k} " + ", ".join(f"{a:.3f}" for a in v) for k, v in alphas.items())
    record(11, ok, f"residual weights {detail} (all in (0,1)); "
                   f"{len(warn)} at or above {A.RESIDUAL_WARN}")
    assert ok


# -- 12 ---------------------------------------------------------------------------------------------

def test_criterion_12_runtime_scaling():
    t0 = time.perf_counter()
    lengths = (512, 1024, 2048)
    tj, van = bench_models(2, 64, lengths)
    times = time_interleaved({"tj": tj, "vanilla": van}, lengths, repeats=20, warmup=3)
    tt = {n: times[("tj", n)] for n in lengths}
    tv = {n: times[("vanilla", n)] for n in lengths}
    r1, r2 = tt[1024] / tt[512], tt[2048] / tt[1024]
    rv = tv[2048] / tv[1024]
    elapsed = time.perf_counter() - t0
    ok = r1 <= 2.5 and r2 <= 2.5 and rv >= 3.0 and tt[2048] < tv[2048] and elapsed < 600
    record(12, ok, f"TJ t(2N)/t(N) {r1:.2f}, {r2:.2f} (<= 2.5); vanilla 1024->2048 {rv:.2f} "
                   f"(>= 3.0); N=2048 TJ {tt[2048] * 1e3:.1f} ms vs vanilla "
                   f"{tv[2048] * 1e3:.1f} ms, {elapsed:.0f}s")
    assert ok


# -- 13 ---------------------------------------------------------------------------------------------

def test_criterion_13_recon_learnable():
    t0 = time.perf_counter()
    m = transject(d=8)
    x = np.random.default_rng(3).normal(size=(12, 8))
    g = Tensor(x.T @ x)
    opt = Adam({"u": m.u_basis.raw}, lr=0.02)
    with no_grad():
        first = approx_eigen(g, m.u_basis)[1].item()
    for _ in range(500):
        opt.zero_grad()
        backward(approx_eigen(g, m.u_basis)[1])
        opt.step()
    with no_grad():
        final = approx_eigen(g, m.u_basis)[1].item()
    elapsed = time.perf_counter() - t0
    ok = final < 0.1 * first and elapsed < 60
    record(13, ok, f"recon loss {first:.4g} -> {final:.4g} "
                   f"({100 * final / first:.2f}% of initial, < 10%), {elapsed:.0f}s")
    assert ok


# -- 14 ---------------------------------------------------------------------------------------------

def test_criterion_14_determinism(desk):
    a, b = desk["transject"].run_dir, desk["transject_repeat"].run_dir
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    same_analysis = ((a / "analysis" / "metrics.csv").read_bytes()
                     == (b / "analysis" / "metrics.csv").read_bytes())
    record(14, same and same_analysis, f"rerun of the desk TransJect config: metrics.csv "
                                       f"identical {same}, analysis/metrics.csv identical "
                                       f"{same_analysis}")
    assert same and same_analysis

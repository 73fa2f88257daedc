"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL - detail`` line (visible
with ``-s`` or in the captured report) before asserting.
"""
import math
import time

import numpy as np
import pytest

from normbench import checkpoint as ck
from normbench import config as C
from normbench import experiment as E
from normbench import tensor as T
from normbench.cli import main
from normbench.conditioning import c_p, c_p_from_spectrum, singular_values
from normbench.model import ModelConfig, TransformerEncoder
from normbench.norm import MaskedBatch, NormState, RegularizerConfig, bn_forward_train, decomposition_check, rbn_penalty
from normbench.tasks import TaskSpec, batches, collate, make_task
from normbench.tensor import Tensor
from normbench.tid import (
    FeatureProbe, PopulationSnapshot, apply_snapshot, compute_tid, estimate_population, measure_tid, measuring,
)
from normbench.train import TrainState, compute_losses, evaluate, train_step

from oracles import singular_values_power, tid_direct


@pytest.fixture
def verdict(capsys):
    def say(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail
    return say


# 1 ------------------------------------------------------------------------

def test_identity_suite(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 33))
        x, mu_b, mu = rng.standard_normal((3, d)) * rng.uniform(0.1, 10)
        s_b, s = rng.uniform(0.05, 5, (2, d))
        worst = max(worst, decomposition_check(x, mu_b, s_b, mu, s))
    stress = 0.0
    for s_b, s in ((1e3, 1e-3), (1e-3, 1e3), (1e-4, 1e-4), (1e4, 1e4)):
        x, mu_b, mu = rng.standard_normal((3, 64))
        stress = max(stress, decomposition_check(x, mu_b, np.full(64, s_b), mu, np.full(64, s)))
    verdict(1, worst < 1e-12 and stress < 1e-9, f"max residual {worst:.2e} (random), {stress:.2e} (stress)")


# 2 ------------------------------------------------------------------------

def _toy(seed, kind="rbn"):
    spec = TaskSpec("copy", n_train=64, n_valid=16)
    cfg = ModelConfig(num_layers=2, d_model=8, num_heads=2, ffn_dim=16, norm_kind=kind,
                      max_seq_len=spec.seq_len, dtype="float64")
    train, _ = make_task(spec, seed)
    return TransformerEncoder(cfg, seed=seed), train


def test_gradient_suite(verdict):
    reg = RegularizerConfig(0.1, 0.1)
    errors, coords = [], []
    for seed in range(5):
        model, train = _toy(seed)
        batch = collate(train[:6])
        model.set_mode("train")
        model.observe(batch)  # move running statistics off their (0, 1) initialization
        frozen = [(s, s.running_mean.copy(), s.running_var.copy(), s.update_count)
                  for s in model.norm_states().values()]

        def loss():
            for s, m, v, c in frozen:
                s.running_mean, s.running_var, s.update_count = m.copy(), v.copy(), c
            return compute_losses(model, batch, reg)[2]

        params = model.parameters()
        for p in params.values():
            p.grad = None
        T.backward(loss())
        r = np.random.default_rng(seed + 50)
        an, fd = [], []
        for name in r.choice(sorted(params), size=10, replace=False):
            p = params[name]
            idx = r.choice(p.size, size=min(3, p.size), replace=False)
            fd.append(T.finite_diff(lambda: loss().item(), [p], indices=[idx])[0].reshape(-1)[idx])
            an.append(p.grad.reshape(-1)[idx])
        an, fd = np.concatenate(an), np.concatenate(fd)
        coords.append(len(an))
        errors.append(T.relative_error(an, fd))
    ok = max(errors) < 1e-4 and min(coords) >= 20
    verdict(2, ok, f"max relative error {max(errors):.2e} over 5 seeds, {min(coords)}+ coordinates each")


# 3 ------------------------------------------------------------------------

def test_stop_gradient(verdict):
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((4, 6, 5)), requires_grad=True)
    mask = np.ones((4, 6), dtype=bool)
    theta = Tensor(rng.uniform(0.5, 1.5, 5), requires_grad=True)
    reg = RegularizerConfig(1.0, 1.0)

    def penalty(ref_mean, ref_var):
        st = NormState(5, dtype=np.float64)
        st.load(np.zeros(5), np.ones(5))
        bn_forward_train(MaskedBatch(x, mask), st)
        st.ref_mean, st.ref_var = ref_mean, ref_var
        return rbn_penalty([st], reg)

    base = penalty(np.zeros(5), np.ones(5)).item()
    moved = penalty(np.full(5, 0.3), np.full(5, 2.0)).item()
    x.grad = None
    p = penalty(theta * 0.3, theta * theta + 1.0)
    T.backward(p)
    theta_zero = theta.grad is None or bool(np.all(theta.grad == 0))
    x_gets_grad = x.grad is not None and bool(np.any(x.grad != 0))
    ok = moved != base and theta_zero and x_gets_grad
    verdict(3, ok, f"penalty {base:.4f} -> {moved:.4f} when stored stats move; "
                   f"gradient on stats-only parameter is {'exactly zero' if theta_zero else 'NONZERO'}")


# 4 ------------------------------------------------------------------------

def test_tid_zero_law_and_scale_invariance(verdict):
    rng = np.random.default_rng(4)
    model, train = _toy(0, kind="bn")
    full = collate(train)
    zero_model = max(max(m, v) for _, m, v in measure_tid(model, [full]).per_layer)
    probe = FeatureProbe(4, [None, rng.standard_normal((4, 4)), rng.standard_normal((4, 3))])
    x = rng.standard_normal((40, 4)) * 3 + 1
    zero_probe = max(max(m, v) for _, m, v in measure_tid(probe, [x]).per_layer)
    data = [rng.standard_normal((16, 4)) * 3 + np.array([1.0, -2.0, 0.5, 0.0]) for _ in range(8)]
    a = measure_tid(probe, data)
    b = measure_tid(probe, [10 * d for d in data])
    shift = max(max(abs(m1 - m2), abs(v1 - v2)) for (_, m1, v1), (_, m2, v2) in zip(a.per_layer, b.per_layer))
    ok = zero_model < 1e-6 and zero_probe < 1e-6 and shift <= 1e-9
    verdict(4, ok, f"single-batch TID max {max(zero_model, zero_probe):.1e}; x10 rescale shift {shift:.1e}")


# 5 ------------------------------------------------------------------------

def test_tid_arithmetic_oracle(verdict):
    x = np.array([[1.3, 0.6], [-0.7, -1.4]])  # batch mean [0.3, -0.4], batch std [1, 1]
    snap = PopulationSnapshot([np.zeros(2)], [np.ones(2)])
    got = compute_tid(FeatureProbe(2), [x], snap).per_layer[0][1]
    oracle, _ = tid_direct([[0.3, -0.4]], [[1.0, 1.0]], [0.0, 0.0], [1.0, 1.0])
    ok = abs(got - oracle) <= 1e-6 and abs(got - 0.5 / math.sqrt(2)) <= 1e-6 and round(got, 5) == 0.35355
    verdict(5, ok, f"mean TID {got:.9f}, oracle {oracle:.9f}, rounds to {round(got, 5)}")


# 6 ------------------------------------------------------------------------

def test_ema_estimation(verdict):
    alpha, n, m, mu, sigma = 0.1, 500, 32, 2.0, 1.5
    se = math.sqrt(alpha / (2 - alpha) * (1 - (1 - alpha) ** (2 * n))) * sigma / math.sqrt(m)
    hits = 0
    for seed in range(40):
        r = np.random.default_rng(seed)
        st = NormState(1, alpha=alpha, dtype=np.float64)
        for _ in range(n):
            bn_forward_train(MaskedBatch.dense(mu + sigma * r.standard_normal((m, 1)), dtype=np.float64), st)
        hits += abs(st.running_mean[0] - mu) <= 3 * se
    verdict(6, hits >= 38, f"{hits}/40 seeds within 3 SE ({se:.4f}) of the true mean")


# 7 ------------------------------------------------------------------------

def test_conditioning_oracle(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        x = rng.standard_normal((128, 32))
        worst = max(worst, T.relative_error(singular_values(x), singular_values_power(x)))
    spec = [4.0, 2.0, 1.0]
    exact = c_p_from_spectrum(spec, 0.5) == 2 and c_p_from_spectrum(spec, 0.8) == 4
    q1, _ = np.linalg.qr(rng.standard_normal((10, 3)))
    q2, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    built = q1 @ np.diag(spec) @ q2.T
    close = abs(c_p(built, 0.5) - 2) < 1e-12 and abs(c_p(built, 0.8) - 4) < 1e-12
    ok = worst < 1e-6 and exact and close
    verdict(7, ok, f"max relative error {worst:.1e} over 50 trials; C_50/C_80 of [4,2,1] = "
                   f"{c_p_from_spectrum(spec, 0.5)}/{c_p_from_spectrum(spec, 0.8)}")


# 8 ------------------------------------------------------------------------

DIRECTIONAL = """\
task.kind = copy
task.vocab_size = 32
task.min_len = 4
task.max_len = 12
task.n_train = 2048
task.n_valid = 256
model.num_layers = 4
model.placement = pre
model.d_model = 32
model.num_heads = 2
model.ffn_dim = 64
optim.batch_size = 4
optim.lr = 3e-3
optim.warmup = 200
optim.max_steps = 3000
optim.log_every = 3000
measure.tid_every_epoch = false
measure.cond_every = 0
norm.kind = rbn
norm.lambda = {lam}
norm.nu = {lam}
seed = {seed}
"""


@pytest.mark.slow
def test_directional_rbn(verdict, tmp_path):
    t0 = time.perf_counter()
    tid_wins = loss_wins = 0
    rows = []
    for seed in range(3):
        res = {}
        for lam in (0.0, 0.1):
            cfg = C.parse_text(DIRECTIONAL.format(lam=lam, seed=seed))
            res[lam] = E.run(cfg, tmp_path / f"lam{lam}_seed{seed}")
        bn, rbn = res[0.0], res[0.1]
        t_bn, t_rbn = bn.final_tid["last_layer_total_tid"], rbn.final_tid["last_layer_total_tid"]
        tid_wins += t_rbn <= t_bn
        loss_wins += rbn.final_valid_loss <= bn.final_valid_loss
        rows.append(f"s{seed}: TID {t_rbn:.3f}/{t_bn:.3f} loss {rbn.final_valid_loss:.3f}/{bn.final_valid_loss:.3f}")
    elapsed = time.perf_counter() - t0
    ok = tid_wins >= 2 and loss_wins >= 2 and elapsed <= 300
    verdict(8, ok, f"RBN wins TID {tid_wins}/3, valid loss {loss_wins}/3 in {elapsed:.0f}s "
                   f"(rbn/bn: {'; '.join(rows)})")


# 9 ------------------------------------------------------------------------

def test_rbn_zero_weights_equals_bn(verdict):
    spec = TaskSpec("copy", n_train=256, n_valid=16)
    train, _ = make_task(spec, 0)
    runs = {}
    for kind in ("bn", "rbn"):
        cfg = ModelConfig(num_layers=2, d_model=16, num_heads=2, ffn_dim=32, norm_kind=kind, max_seq_len=spec.seq_len)
        state = TrainState.create(TransformerEncoder(cfg, seed=0), base_lr=3e-3, warmup=50,
                                  reg=RegularizerConfig(0.0, 0.0))
        rng = np.random.default_rng(0)
        losses = []
        while state.step < 500:
            for batch in batches(train, 16, rng):
                if state.step == 500:
                    break
                losses.append(train_step(state, batch)[1].total)
        runs[kind] = (state.model, losses)
    (bn, l_bn), (rbn, l_rbn) = runs["bn"], runs["rbn"]
    same_params = all(bn.parameters()[k].data.tobytes() == p.data.tobytes() for k, p in rbn.parameters().items())
    same_stats = all(a.running_mean.tobytes() == b.running_mean.tobytes() and a.running_var.tobytes() == b.running_var.tobytes()
                     for a, b in zip(bn.norm_states().values(), rbn.norm_states().values()))
    ok = same_params and same_stats and l_bn == l_rbn
    verdict(9, ok, f"500 steps: parameters {'identical' if same_params else 'differ'}, "
                   f"running stats {'identical' if same_stats else 'differ'}, "
                   f"losses {'identical' if l_bn == l_rbn else 'differ'}")


# 10 -----------------------------------------------------------------------

def test_reestimation_behaviors(verdict, tmp_path):
    cfg = C.parse_text("optim.max_steps = 500\noptim.log_every = 500\nmeasure.tid_every_epoch = false\n"
                       "measure.cond_every = 0\n")
    E.run(cfg, tmp_path / "r")
    src = ck.load(tmp_path / "r" / E.FINAL_CKPT)
    epochs = 2
    new = E.reestimate(src, epochs=epochs)
    params_same = all(new.arrays[k].tobytes() == v.tobytes() for k, v in src.arrays.items() if k.startswith("param/"))

    c2, model, train = E.model_from_checkpoint(new)
    data = batches(train, c2.optim.batch_size)
    snap = estimate_population(model, data)
    # per-batch statistics give the spread the EMA averages over
    means, varis = [[] for _ in model.stat_layers()], [[] for _ in model.stat_layers()]
    with measuring(model):
        for b in data:
            model.observe(b)
            for i, l in enumerate(model.stat_layers()):
                means[i].append(l.state.last_batch_mean.astype(np.float64))
                varis[i].append(l.state.last_batch_var.astype(np.float64))
    a = c2.norm.alpha
    root_w2 = math.sqrt(a / (2 - a) * (1 - (1 - a) ** (2 * epochs * len(data))))
    z = []
    for i, l in enumerate(model.stat_layers()):
        se_m = np.std(means[i], axis=0) * root_w2
        se_v = np.std(varis[i], axis=0) * root_w2
        z.append(np.abs(l.state.running_mean - snap.means[i]) / se_m)
        z.append(np.abs(l.state.running_var - snap.stds[i] ** 2) / se_v)
    z = np.concatenate(z)
    within = int((z <= 3).sum())

    valid = E.build(c2)[2]
    full = batches(valid, len(valid))
    apply_snapshot(model, estimate_population(model, full))
    pop = evaluate(model, valid, "population", batch_size=len(valid)).loss
    bst = evaluate(model, valid, "batch-stats", batch_size=len(valid)).loss
    gap = abs(pop - bst)
    ok = params_same and within == len(z) and gap < 1e-4
    verdict(10, ok, f"parameters {'bitwise unchanged' if params_same else 'CHANGED'}; {within}/{len(z)} "
                    f"statistics within 3 SE (max z {z.max():.2f}); population vs batch-stats loss gap {gap:.1e}")


# 11 -----------------------------------------------------------------------

TOOLING = """\
model.d_model = 16
model.ffn_dim = 32
task.n_train = 128
task.n_valid = 32
optim.batch_size = 16
optim.max_steps = 40
optim.log_every = 10
measure.cond_every = 10
"""


def test_tooling(verdict, tmp_path):
    files = (E.TRAIN_LOG, E.TID_CSV, E.COND_CSV)
    base = C.parse_text(TOOLING)
    same = True
    for seed in (0, 1):
        cfg = C.parse_text(TOOLING + f"seed = {seed}\n")
        E.run(cfg, tmp_path / f"a{seed}")
        E.run(cfg, tmp_path / f"b{seed}")
        same &= all((tmp_path / f"a{seed}" / f).read_bytes() == (tmp_path / f"b{seed}" / f).read_bytes() for f in files)
    for tag in ("s1", "s2"):
        E.sweep(base, [0.0, 0.1], [0.1], [0, 1], tmp_path / tag, threads=1)
    for lam in (0.0, 0.1):
        for seed in (0, 1):
            name = E._grid_dir(lam, 0.1, seed)
            same &= all((tmp_path / "s1" / name / f).read_bytes() == (tmp_path / "s2" / name / f).read_bytes()
                        for f in files)
    same &= (tmp_path / "s1" / "sweep.csv").read_bytes() == (tmp_path / "s2" / "sweep.csv").read_bytes()

    bad = tmp_path / "bad.cfg"
    bad.write_text(TOOLING + "norm.lambada = 0.1\n")
    rejected = main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    rejected &= not (tmp_path / "x").exists()

    first = (tmp_path / "a0" / E.FINAL_CKPT).read_bytes()
    ck.save(tmp_path / "again.nbck", ck.load(tmp_path / "a0" / E.FINAL_CKPT))
    roundtrip = (tmp_path / "again.nbck").read_bytes() == first
    ok = same and rejected and roundtrip
    verdict(11, ok, f"CSV determinism {'byte-identical' if same else 'DIFFERS'}; unknown key "
                    f"{'rejected (exit 2)' if rejected else 'ACCEPTED'}; checkpoint round trip "
                    f"{'byte-identical' if roundtrip else 'DIFFERS'}")

"""End-to-end acceptance checks.

Each test records one PASS/FAIL line (shown in the terminal summary) before
asserting. Expected values come from closed forms or from the brute-force
oracle, never from the code under test.
"""

import math

import numpy as np
import pytest
from scipy import optimize, stats

from eflab import synthdata
from eflab.corruption import corrupt, deletion_time_of_image
from eflab.losses import zero_inflated_loss
from eflab.metrics import MetricReport, binomial_sigma, empirical, tv_distance
from eflab.model import ModelDims, ModelParams, ToyModel, TrainConfig, batch_loss, loss_and_grad, train
from eflab.oracle import OracleModel, OracleTable, expected_text_loss, loss_floor, point_target_velocity
from eflab.sampler import PromptDropped, SamplerConfig, euler_flow, generate, generate_batch
from eflab.schedule import Schedule
from eflab.sequence import ImageBlock, MixedSequence, Vocabulary, is_image

V = Vocabulary(4)
LIN = Schedule.linear()


def oracle_model(data, vocab=V, schedule=LIN, prompt_len=0):
    table = OracleTable([(MixedSequence(tuple(k), prompt_len, None), w) for k, w in data.items()], vocab, schedule)
    return OracleModel(table, freeze_off_support=True)


def test_retention_law(criterion):
    rng = np.random.default_rng(0)
    x = MixedSequence((0, 1, 2, 3) * 2, 0, None)
    n = 100_000
    kept = [len(corrupt(x, LIN, "text_only", rng).x_t) / len(x) for _ in range(n)]
    mean = float(np.mean(kept))
    rep = MetricReport.at_most("retained_fraction_error", abs(mean - 0.5), 0.005, n, 0, detail=f"mean={mean:.5f}")
    criterion("[1 retention]", rep)
    assert rep.passed


@pytest.mark.parametrize("schedule", [LIN, Schedule.polynomial(2)], ids=["linear", "poly2"])
def test_insertion_time_law(criterion, schedule):
    dt = 1e-3
    model = oracle_model({(0, 1, 2): 1.0}, schedule=schedule)
    res = generate_batch(MixedSequence((), 0, 3), model, SamplerConfig(dt=dt, max_len=3, schedule=schedule), V, 10_000, np.random.default_rng(1))
    times = np.array([t for ts in res.insertion_times for t in ts])
    # recorded times are step ends; spread each over its step before the KS test
    times = times + np.random.default_rng(2).uniform(-dt, 0.0, times.size)
    p = stats.kstest(times, lambda x: schedule.kappa(np.clip(x, 0.0, 1.0))).pvalue
    rep = MetricReport.at_least(f"insertion_time_ks_pvalue_{schedule.kind}", p, 0.01, times.size, 1)
    criterion("[2 insertion times]", rep)
    assert rep.passed


CLOSURE_SETS = {
    "ab_c": {(0, 1): 0.5, (2,): 0.5},
    "aba_b": {(0, 1, 0): 0.4, (1,): 0.6},
    "three": {(0,): 0.2, (0, 1): 0.3, (1, 0, 2): 0.5},
}


@pytest.mark.parametrize("name", list(CLOSURE_SETS))
def test_oracle_closure(criterion, name):
    data = CLOSURE_SETS[name]
    model = oracle_model(data)
    tvs = []
    for dt in (1e-1, 1e-2, 1e-3):
        res = generate_batch(MixedSequence((), 0, 6), model, SamplerConfig(dt=dt, max_len=6), V, 100_000, np.random.default_rng(3))
        tvs.append(tv_distance(empirical(res.sequences), data))
    decreasing = tvs[0] > tvs[1] > tvs[2]
    rep = MetricReport.at_most(f"closure_tv_{name}", tvs[-1], 0.05, 100_000, 3)
    rep.passed = rep.passed and decreasing
    criterion(f"[3 oracle closure, tv by dt={', '.join(f'{v:.5f}' for v in tvs)}]", rep)
    assert rep.passed


COUNT_LAWS = {
    "poisson": {k: stats.poisson.pmf(k, 1.5) for k in range(40)},
    "geometric": {k: 0.4 * 0.6**k for k in range(80)},
    "custom": {0: 0.5, 1: 0.1, 2: 0.15, 5: 0.25},
}


@pytest.mark.parametrize("law", list(COUNT_LAWS))
def test_zero_inflated_consistency(criterion, law):
    pmf = COUNT_LAWS[law]
    total = math.fsum(pmf.values())
    pmf = {k: p / total for k, p in pmf.items()}
    p0 = pmf.get(0, 0.0)
    mean_nonzero = math.fsum(k * p for k, p in pmf.items()) / (1.0 - p0)

    def expected(x):
        return math.fsum(p * sum(zero_inflated_loss(x[0], x[1], k)) for k, p in pmf.items())

    bounds = ((1e-4, 1 - 1e-4), (1e-3, 20.0))
    coarse = optimize.brute(expected, bounds, Ns=60, finish=None)
    fine = optimize.minimize(expected, coarse, bounds=bounds, method="L-BFGS-B", options={"ftol": 1e-15, "gtol": 1e-10})
    err = max(abs(fine.x[0] - p0), abs(fine.x[1] - mean_nonzero))
    rep = MetricReport.at_most(f"zero_inflated_argmin_error_{law}", err, 1e-3, len(pmf), None)
    criterion("[4 zero-inflated]", rep)
    assert rep.passed


def test_gradient_fidelity(criterion):
    dims = ModelDims(vocab_size=3, n_img=2, d=2, d_h=3, max_len=6, use_text_time=True)
    data = [
        MixedSequence((0, ImageBlock([1.0, -1.0]), 1), 1, None),
        MixedSequence((1, 2, ImageBlock([0.5, 0.5])), 0, None),
        MixedSequence((2,), 0, None),
    ]
    rng = np.random.default_rng(5)
    eps = 1e-5
    worst = 0.0
    for point in range(100):
        p = ModelParams.init(dims, rng, scale=0.5)
        recs = [corrupt(x, LIN, "interleaved", rng, image_token_id=3) for x in data]
        _, grads, _ = loss_and_grad(p, recs)
        vec = p.flat()
        analytic = np.concatenate([grads[k].ravel() for k in p.names()])
        for i in range(vec.size):
            e = np.zeros_like(vec)
            e[i] = eps
            fd = (batch_loss(p.with_flat(vec + e), recs).total.item() - batch_loss(p.with_flat(vec - e), recs).total.item()) / (2 * eps)
            # ratio <= 1 iff the pair is within atol + rtol * |analytic|
            worst = max(worst, abs(fd - analytic[i]) / (1e-7 + 1e-4 * abs(analytic[i])))
    rep = MetricReport.at_most("gradient_error_over_tolerance", worst, 1.0, 100, 5)
    criterion("[5 gradients]", rep)
    assert rep.passed


def test_flow_matching_exactness(criterion):
    rng = np.random.default_rng(6)
    target = np.array([3.0, -4.0])
    y = euler_flow(rng.standard_normal((1000, 2)), 0.0, 1.0, lambda y, t: point_target_velocity([target], [1.0], y, t), 100)
    rel = float(np.max(np.linalg.norm(y - target, axis=1)) / np.linalg.norm(target))
    single = MetricReport.at_most("single_target_relative_error", rel, 1e-6, 1000, 6)

    targets = np.array([[2.0, 0.0], [-2.0, 0.0]])
    weights = np.array([0.3, 0.7])
    n = 10_000
    y = euler_flow(rng.standard_normal((n, 2)), 0.0, 1.0, lambda y, t: point_target_velocity(targets, weights, y, t), 500)
    basin = np.argmin(np.linalg.norm(y[:, None, :] - targets, axis=2), axis=1)
    freq = float(np.mean(basin == 0))
    z = abs(freq - weights[0]) / binomial_sigma(weights[0], n)
    mixture = MetricReport.at_most("basin_frequency_z", z, 3.0, n, 6)
    rep = MetricReport.at_most("flow_exactness_worst_ratio", max(rel / 1e-6, z / 3.0), 1.0, n, 6)
    rep.passed = single.passed and mixture.passed
    criterion(f"[6 flow matching, rel={rel:.2e}, z={z:.2f}]", rep)
    assert rep.passed


def test_interleaved_schedule_law(criterion):
    rng = np.random.default_rng(7)
    n = 100_000
    worst = 0.0
    for tau in (0.25, 0.5, 0.75, 1.0, 1.5):
        present = np.mean([deletion_time_of_image(LIN, tau, rng) is not None for _ in range(n)])
        expected = LIN.kappa(min(tau, 1.0))
        sigma = binomial_sigma(expected, n)
        z = abs(present - expected) / sigma if sigma > 0 else (0.0 if present == expected else np.inf)
        worst = max(worst, z)
    rep = MetricReport.at_most("image_presence_worst_z", worst, 3.0, n, 7)
    criterion("[7 interleaved schedule]", rep)
    assert rep.passed


def test_end_to_end_interleaved(criterion):
    spec = synthdata.paired_spec(seed=0)
    data = synthdata.generate(spec, 2000)
    dims = ModelDims(vocab_size=spec.vocab_size, n_img=spec.n_img, d=8, d_h=16, max_len=spec.max_len, use_text_time=True)
    cfg = TrainConfig(lr=3e-3, steps=10_000, batch_size=64, seed=0, mode="interleaved", optimizer="adam", lr_decay="linear")
    model = ToyModel(train(data, cfg, LIN, dims).params)

    rng = np.random.default_rng(100)
    sampler = SamplerConfig(dt=0.01, mode="interleaved", max_len=spec.max_len, n_img=spec.n_img)
    counts, hits = [], []
    for run in range(1000):
        cls = spec.classes[run % len(spec.classes)]
        out, _ = generate(MixedSequence(cls.prompt, len(cls.prompt), spec.max_len), model, sampler, spec.vocab, rng)
        images = [el for el in out.target if is_image(el)]
        counts.append(len(images))
        hits += [np.linalg.norm(im.values - np.asarray(cls.mean)) <= 3 * cls.std for im in images]
    tv = tv_distance(empirical(counts), spec.image_count)
    hit_rate = float(np.mean(hits))
    count_rep = MetricReport.at_most("image_count_tv", tv, 0.05, 1000, 0)
    hit_rep = MetricReport.at_least("class_centroid_hit_rate", hit_rate, 0.9, len(hits), 0)
    criterion("[8 interleaved generation]", count_rep)
    criterion("[8 interleaved generation]", hit_rep)
    assert count_rep.passed and hit_rep.passed


def _asymmetric_tables(with_images=False):
    vocab = Vocabulary(5)
    img = (ImageBlock([1.0, 0.0]),) if with_images else ()
    data = [(MixedSequence((3, 0, 1, 2) + img, 1, None), 0.5), (MixedSequence((4, 0), 1, None), 0.5)]
    table = OracleTable(data, vocab, LIN)
    return vocab, OracleModel(table, freeze_off_support=True), OracleModel(table.without_prompts(), freeze_off_support=True)


@pytest.mark.parametrize("mode", ["text_only", "interleaved"])
def test_guidance_identities(criterion, mode):
    vocab, cond, uncond = _asymmetric_tables(with_images=mode == "interleaved")
    prompt = MixedSequence((3,), 1, 8)
    mismatches = 0
    runs = 100
    for w, reference, ref_uncond in ((1.0, cond, None), (0.0, PromptDropped(uncond), None)):
        for seed in range(runs):
            cfg = SamplerConfig(dt=0.05, mode=mode, max_len=8, guidance_w=w)
            plain = SamplerConfig(dt=0.05, mode=mode, max_len=8)
            a = generate(prompt, cond, cfg, vocab, np.random.default_rng(seed), uncond_model=uncond)[1]
            b = generate(prompt, reference, plain, vocab, np.random.default_rng(seed), uncond_model=ref_uncond)[1]
            mismatches += a.to_json(vocab.image_token_id) != b.to_json(vocab.image_token_id)
    rep = MetricReport.at_most(f"guidance_identity_mismatches_{mode}", mismatches, 0, 2 * runs, None)
    criterion("[9 guidance identities]", rep)
    assert rep.passed


def test_guidance_length_trend(criterion):
    vocab, cond, uncond = _asymmetric_tables()
    prompt = MixedSequence((3,), 1, 8)
    means = []
    for w in (0.0, 1.0, 2.0):
        cfg = SamplerConfig(dt=0.01, max_len=8, guidance_w=w)
        res = generate_batch(prompt, cond, cfg, vocab, 10_000, np.random.default_rng(9), uncond_model=uncond)
        means.append(float(np.mean([len(s) for s in res.sequences])))
    steps_down = max(means[0] - means[1], means[1] - means[2])
    rep = MetricReport.at_most("mean_length_decrease", steps_down, 0.0, 10_000, 9)
    criterion(f"[9 guidance trend, mean length={', '.join(f'{m:.3f}' for m in means)}]", rep)
    assert rep.passed


def test_training_reaches_loss_floor(criterion):
    vocab = Vocabulary(3)
    data = [(MixedSequence((0, 1), 0, None), 0.5), (MixedSequence((2,), 0, None), 0.5)]
    table = OracleTable(data, vocab, LIN)
    dims = ModelDims(vocab_size=3, d=4, d_h=6, max_len=6)
    cfg = TrainConfig(lr=1e-2, steps=3000, batch_size=16, seed=0, optimizer="adam")
    model = ToyModel(train(data, cfg, LIN, dims).params)
    times = np.round(np.arange(0.1, 1.0, 0.1), 10)
    achieved = np.mean([expected_text_loss(table, t, lambda x, t=t: model.insertion_heads(x, t)) for t in times])
    floor = np.mean([loss_floor(table, t) for t in times])
    gap = (achieved - floor) / floor
    rep = MetricReport.at_most("loss_floor_relative_gap", gap, 0.05, len(times), 0, detail=f"achieved={achieved:.6f} floor={floor:.6f}")
    criterion(f"[10 training floor, achieved={achieved:.5f} floor={floor:.5f}]", rep)
    assert rep.passed

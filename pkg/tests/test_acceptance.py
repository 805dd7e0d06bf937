"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL verdict (shown in the terminal summary) before
asserting, so a failing criterion still reports its measured numbers.
"""

import math
import time

import numpy as np
import pytest
from oracles import (
    brute_force_decode,
    check_layer,
    numeric_grad,
    randomized,
    rel_error,
    separable,
)

from peristalsis import NP, P
from peristalsis.cnn import (
    Conv1D,
    Dense,
    Dropout,
    Flatten,
    MaxPool1D,
    ReLU,
    TrainConfig,
    init_model,
    softmax,
    softmax_cross_entropy,
    train,
)
from peristalsis.errors import InputError
from peristalsis.evaluation import featurize_dataset, observation_benchmark, run_lopocv
from peristalsis.hsmm import HsmmParams, learn_durations, viterbi_refine
from peristalsis.metrics import ConfusionCounts, compute_metrics, f1_score
from peristalsis.mfcc import MfccConfig, dct_matrix, hz_to_mel, mel_to_hz, mfcc_frames
from peristalsis.synth import SynthSpec, gen_dataset, uniform_table


# ---- 1: HSMM decoder against exhaustive enumeration ------------------------------

def test_c1_hsmm_matches_brute_force(verdict):
    rng = np.random.default_rng(2024)
    mismatches, worst_ll, impossible, decode_time = 0, 0.0, 0, 0.0
    for _ in range(500):
        T = int(rng.integers(1, 11))
        tabs = {}
        for s in (NP, P):
            t = rng.random(int(rng.integers(1, 6))) + 0.05
            tabs[s] = t / t.sum()
        pi_p = float(rng.random())
        sigma = float(rng.choice([0.5, 5.0]))
        prm = HsmmParams({P: pi_p, NP: 1 - pi_p}, tabs, sigma)
        obs = rng.random(T)
        runs, ll = brute_force_decode(obs, prm.pi, prm.durations, sigma)
        t0 = time.perf_counter()
        try:
            out = viterbi_refine(obs, prm)
        except InputError:
            out = None
        decode_time += time.perf_counter() - t0
        if runs is None:
            impossible += 1
            mismatches += out is not None
            continue
        if out is None or out.runs != runs:
            mismatches += 1
            continue
        worst_ll = max(worst_ll, abs(out.log_likelihood - ll))
    ok = mismatches == 0 and worst_ll <= 1e-9 and decode_time < 10
    verdict("C1 HSMM oracle equivalence", ok,
            f"500 instances, {mismatches} mismatches, {impossible} infeasible, "
            f"max |dLL| {worst_ll:.1e}, decoder {decode_time:.2f}s")
    assert ok


# ---- 2: duration learning hand traces ----------------------------------------------

def test_c2_duration_hand_traces(verdict):
    cases = [
        ([[P, P, NP]], {P: [1 / 3, 2 / 3], NP: [1.0]}),
        ([[P]], {P: [1.0], NP: [1.0]}),
        ([[NP, NP], [NP, NP]], {P: [1.0], NP: [1 / 4, 3 / 4]}),
        # runs P3 NP1 P1 NP2 | NP1 P1
        ([[P, P, P, NP, P, NP, NP], [NP, P]], {P: [3 / 6, 1 / 6, 2 / 6], NP: [3 / 5, 2 / 5]}),
    ]
    results = []
    for seqs, want in cases:
        got = learn_durations(seqs)
        results.append(all(got[s].tolist() == want[s] for s in (NP, P)))
    ok = all(results)
    verdict("C2 duration hand traces", ok, f"{sum(results)}/4 fixtures exact")
    assert ok


# ---- 3: metric arithmetic -----------------------------------------------------------

def test_c3_metric_arithmetic(verdict):
    f1_p = f1_score(0.9654, 0.9169)
    f1_np = f1_score(0.5589, 0.7624)
    ma = (f1_p + f1_np) / 2
    # the same numbers through compute_metrics, from counts whose rates round to the pairs
    c = ConfusionCounts(tp=2934, tn=337, fp=105, fn=266)
    truth = np.array([1] * c.tp + [0] * c.tn + [0] * c.fp + [1] * c.fn)
    pred = np.array([1] * c.tp + [0] * c.tn + [1] * c.fp + [0] * c.fn)
    r = compute_metrics(truth, pred)
    rates = (round(r.p.rec, 4), round(r.p.pre, 4), round(r.np_.rec, 4), round(r.np_.pre, 4))
    ok = (abs(f1_p - 0.9405) < 5e-5 and abs(f1_np - 0.6450) < 5e-5 and abs(ma - 0.7928) < 5e-5
          and rates == (0.9169, 0.9654, 0.7624, 0.5589)
          and abs(r.p.f1 - 0.9405) < 5e-5 and abs(r.np_.f1 - 0.6450) < 5e-5
          and abs(r.ma_f1 - 0.7928) < 5e-5)
    verdict("C3 metric arithmetic", ok,
            f"F1 {f1_p:.6f} / {f1_np:.6f}, MA_F1 {ma:.6f}; from counts {r.p.f1:.6f} / "
            f"{r.np_.f1:.6f} / {r.ma_f1:.6f}")
    assert ok


# ---- 4: CNN gradients ----------------------------------------------------------------

def test_c4_cnn_gradients(verdict):
    rng = np.random.default_rng(0)
    layer_errors = {
        "conv": check_layer(randomized(Conv1D(5, 8, 4)), rng.normal(size=(3, 11, 4)), probes=20),
        "dense": check_layer(randomized(Dense(5, 7)), rng.normal(size=(4, 7)), probes=20),
        "maxpool": check_layer(MaxPool1D(2), rng.permutation(60).reshape(2, 10, 3) / 7.0, probes=20),
        "dropout": check_layer(Dropout(0.1), rng.normal(size=(4, 6, 3)), probes=20, train=True),
        "flatten": check_layer(Flatten(), rng.normal(size=(2, 3, 4)), probes=20),
    }
    x = rng.normal(size=(3, 6, 2))
    x[np.abs(x) < 1e-3] = 0.5
    layer_errors["relu"] = check_layer(ReLU(), x, probes=20)

    z = rng.normal(size=(5, 2))
    y = rng.integers(0, 2, 5)
    _, g = softmax_cross_entropy(z, y)
    sm = 0.0
    for _ in range(20):
        idx = (rng.integers(5), rng.integers(2))
        sm = max(sm, rel_error(g[idx], numeric_grad(lambda: softmax_cross_entropy(z, y)[0], z, idx)))
    layer_errors["softmax-ce"] = sm

    # 20 probes through the whole reference network
    model = init_model(seed=3)
    for _, layer, name in model.named_params():
        if name == "b":
            layer.params[name] = rng.normal(scale=0.1, size=layer.params[name].shape)
    Z = rng.normal(size=(4, 24, 1))
    yy = np.array([0, 1, 1, 0])

    def loss():
        return softmax_cross_entropy(model.logits(Z, train=True, rng=np.random.default_rng(5)), yy)[0]

    _, dlogits = softmax_cross_entropy(model.logits(Z, train=True, rng=np.random.default_rng(5)), yy)
    model.backward(dlogits)
    params = list(model.named_params())
    net = 0.0
    for k in range(20):
        _, layer, name = params[k % len(params)]
        p = layer.params[name]
        idx = tuple(rng.integers(s) for s in p.shape)
        net = max(net, rel_error(layer.grads[name][idx], numeric_grad(loss, p, idx)))

    probs = softmax(rng.normal(scale=30, size=(1000, 2)))
    sum_err = float(np.max(np.abs(probs.sum(axis=1) - 1)))
    worst = max(max(layer_errors.values()), net)
    ok = worst < 1e-4 and sum_err < 1e-9
    verdict("C4 CNN gradient check", ok,
            f"max rel err {worst:.1e} (network {net:.1e}), softmax sum err {sum_err:.1e}")
    assert ok


# ---- 5: CNN learnability -------------------------------------------------------------

def test_c5_cnn_learnability(verdict):
    # hyper-parameters as the reference except the learning rate, raised to 1e-3
    X, y = separable(200, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, epochs=200, seed=0)
    _, curve = train(X, y, cfg, progress=lambda epoch, c: c.train_acc[-1] >= 0.95)
    acc = curve.train_acc[-1]
    ok = acc >= 0.95 and len(curve.train_acc) <= 200
    verdict("C5 CNN learnability", ok,
            f"train acc {acc:.3f} after {len(curve.train_acc)} epochs (lr 1e-3)")
    assert ok


# ---- 6: MFCC -----------------------------------------------------------------------

def test_c6_mfcc(verdict):
    cfg = MfccConfig()
    f = np.geomspace(1.0, 2000.0, 200)
    rt = float(np.max(np.abs(mel_to_hz(hz_to_mel(f)) - f) / f))
    orth = max(float(np.max(np.abs(dct_matrix(n) @ dct_matrix(n).T - np.eye(n)))) for n in (24, 26))
    frames = mfcc_frames(np.zeros(6 * 4000), cfg)
    expected = np.zeros(cfg.numcep)
    expected[0] = math.sqrt(cfg.nfilt) * math.log(1e-10)
    zero_err = float(np.max(np.abs(frames - expected)))
    ok = (hz_to_mel(0) == 0.0 and rt < 1e-9 and orth < 1e-10 and zero_err < 1e-9
          and frames.shape[0] == 598)
    verdict("C6 MFCC correctness", ok,
            f"mel(0)={hz_to_mel(0)}, round-trip {rt:.1e}, DCT {orth:.1e}, "
            f"zero cepstrum err {zero_err:.1e}, {frames.shape[0]} frames")
    assert ok


# ---- 7 and 9: observation-level benchmark ---------------------------------------------

BENCH_SPEC = SynthSpec(dur_p=uniform_table(300, 600), dur_np=uniform_table(100, 300),
                       pi_p=0.88, obs_sigma=0.3, seed=0)
# correct segments out of 30000, frozen from the first run
FROZEN = {"raw": 27170, 5.0: 29956, 0.1: 29768, "conventional": 29998}


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    r = observation_benchmark(BENCH_SPEC, n_sequences=100, length=300, sigmas=(5.0, 0.1), n_train=100)
    return r, time.perf_counter() - t0


def _correct(report):
    c = report.counts
    return c.tp + c.tn


def test_c7_refinement_direction(verdict, benchmark):
    r, elapsed = benchmark
    gain = r.acc_gain(5.0)
    got = {"raw": _correct(r.raw), 5.0: _correct(r.refined[5.0]), 0.1: _correct(r.refined[0.1]),
           "conventional": _correct(r.conventional)}
    ok = (gain >= 0.05 and r.refined[5.0].acc >= r.refined[0.1].acc and elapsed < 60
          and got == FROZEN)
    verdict("C7 refinement direction", ok,
            f"ACC raw {r.raw.acc:.4f} -> sigma 5 {r.refined[5.0].acc:.4f} (+{gain * 100:.2f} pts), "
            f"sigma 0.1 {r.refined[0.1].acc:.4f}, {elapsed:.1f}s")
    assert ok


def test_c9_laplace_beats_conventional(verdict, benchmark):
    r, _ = benchmark
    laplace = r.acc_gain(5.0)
    conventional = r.conventional.acc - r.raw.acc
    ok = laplace >= conventional
    verdict("C9 conventional-emission ablation", ok,
            f"gain Laplace {laplace:+.4f} vs conventional {conventional:+.4f}")
    assert ok


# ---- 8: end-to-end LOPOCV on synthetic audio -------------------------------------------

@pytest.mark.slow
def test_c8_end_to_end_lopocv(verdict):
    # 4 epochs at lr 1e-3 instead of 200 at 1e-5 to fit the time budget
    t0 = time.perf_counter()
    tables = featurize_dataset(gen_dataset(SynthSpec.audio_benchmark(snr_db=10.0)), 6.0, 0.1)
    result = run_lopocv(tables, TrainConfig(epochs=4, learning_rate=1e-3))
    elapsed = time.perf_counter() - t0
    pre, post = result.pooled_pre.acc, result.pooled_post.acc
    leak_free = all(f.subject_id not in f.train_subjects for f in result.folds)
    ok = len(tables) == 8 and post > pre and leak_free and elapsed < 300
    verdict("C8 end-to-end LOPOCV", ok,
            f"8 subjects, ACC pre {pre:.4f} -> post {post:.4f}, {elapsed:.0f}s")
    assert ok

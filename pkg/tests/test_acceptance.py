"""Acceptance criteria. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line."""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn as nn

from pcda import losses as L
from pcda import pipeline as P
from pcda.evalreport import REFERENCE_TABLE, TABLE_COLUMNS, compare_scenarios, reference_reports
from pcda.geometry import emd_approx, emd_exact, emd_gradient, emd_oracle, matched_cost
from pcda.nets import BLOCKS, ModelBundle, NetConfig

from _support import block_inputs, fd_check, flat_output, perturb_running_stats
from conftest import STUDY_SEEDS


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


def mean_accuracy(runs, row):
    return 100 * float(np.mean([m["results"][row]["accuracy"] for m in runs.values()]))


def test_01_emd_oracle_equivalence(report):
    rng = np.random.default_rng(1)
    start = time.time()
    worst = 0.0
    for k in range(100):
        n = 2 + k % 6
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        exact, oracle = emd_exact(a, b).cost, emd_oracle(a, b).cost
        worst = max(worst, abs(exact - oracle) / oracle)
    elapsed = time.time() - start
    report(1, worst <= 1e-9 and elapsed < 10, f"max relative gap {worst:.2e} over 100 pairs, {elapsed:.2f} s")


def test_02_emd_approximation_quality(report):
    rng = np.random.default_rng(2)
    start = time.time()
    worst = 0.0
    for _ in range(50):
        a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
        exact = emd_exact(a, b).cost
        worst = max(worst, abs(emd_approx(a, b, 1e-3).cost - exact) / exact)
    elapsed = time.time() - start
    report(2, worst <= 0.01 and elapsed < 60, f"max relative gap {worst:.2e} over 50 pairs, {elapsed:.2f} s")


def test_03_gradient_suite(report):
    start = time.time()
    rng = np.random.default_rng(3)
    h = 1e-6
    emd_err = 0.0
    for _ in range(20):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
        res = emd_exact(a, b)
        grad = emd_gradient(a, b, res)
        fd = np.zeros_like(a)
        for i in range(6):
            for j in range(3):
                ap, am = a.copy(), a.copy()
                ap[i, j] += h
                am[i, j] -= h
                fd[i, j] = (matched_cost(ap, b, res.mapping) - matched_cost(am, b, res.mapping)) / (2 * h)
        emd_err = max(emd_err, np.linalg.norm(grad - fd) / np.linalg.norm(fd))
    cfg = NetConfig.miniature(width=8, n_points=16, n_classes=3)
    block_err = {}
    for name in BLOCKS:
        block = ModelBundle.initialize(cfg, 11, (name,))[name].double()
        perturb_running_stats(block)
        block.eval()
        block_err[name] = fd_check(block, block_inputs(name, cfg, dtype=torch.float64))
    elapsed = time.time() - start
    worst = max(emd_err, *block_err.values())
    detail = f"emd {emd_err:.1e}, " + ", ".join(f"{k} {v:.1e}" for k, v in block_err.items()) + f"; {elapsed:.1f} s"
    report(3, worst < 1e-4 and elapsed < 300, detail)


class _Flatten(nn.Module):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class _Unflatten(nn.Module):
    def forward(self, code):
        return code.reshape(code.shape[0], -1, 3)


class _KeepCode(nn.Module):
    def forward(self, code, z):
        return code


class _Uniform(nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0], 10, dtype=x.dtype)


class _Switch(nn.Module):
    """Scores 1 on codes carrying the marker, 0 elsewhere."""

    def forward(self, code):
        return (code[:, 0] > 50).double()


def test_04_loss_identities(report):
    cfg = NetConfig(cloud_size=4, latent_dim=12, mode_dim=2, n_classes=10)
    blocks = {"encoder": _Flatten(), "decoder": _Unflatten(), "generator": _KeepCode(), "discriminator": _Switch(),
              "classifier": _Uniform()}
    bundle = ModelBundle(cfg, blocks, {k: False for k in blocks})
    g = torch.Generator().manual_seed(4)
    x = torch.randn(5, 4, 3, generator=g, dtype=torch.float64)
    z = torch.randn(5, 2, generator=g, dtype=torch.float64)
    target = x.clone()
    target[:, 0, 0] = 100.0
    d_opt = L.loss_adv_discriminator(x, target, z, bundle).item()
    ce = L.loss_classification(x, [0, 3, 9, 9, 1], z, bundle).item()
    composed = L.compose_report(1.0, 2.0, 3.0, 4.0, L.LossWeights(*P.SCENARIO_WEIGHTS["M-S"])).total
    ok = d_opt == 0.0 and abs(ce - np.log(10)) < 1e-9 and abs(composed - 1.29) < 1e-12
    report(4, ok, f"D at optimum {d_opt}, uniform CE - ln 10 = {ce - np.log(10):.1e}, M-S composition {composed:.12g}")


def test_05_permutation_invariance(report):
    cfg = NetConfig.miniature(width=8, n_points=32, n_classes=3)
    g = torch.Generator().manual_seed(5)
    broken = []
    for name in ("encoder", "mode_encoder", "classifier"):
        block = ModelBundle.initialize(cfg, 5, (name,))[name].eval()
        x = torch.randn(3, 32, 3, generator=g)
        with torch.no_grad():
            ref = flat_output(block(x))
            for _ in range(20):
                if not torch.equal(flat_output(block(x[:, torch.randperm(32, generator=g)])), ref):
                    broken.append(name)
                    break
    report(5, not broken, "exact equality under 20 permutations per block" if not broken else f"broken: {broken}")


@pytest.mark.slow
def test_06_freeze_and_determinism(report, toy_study, tmp_path):
    seed = STUDY_SEEDS[0]
    kept = toy_study.kept[seed]
    data, pretrained = kept["data"], kept["pretrained"]
    config = replace(toy_study.config, seed=seed)
    before = {n: {k: v.clone() for k, v in pretrained[n].state_dict().items()} for n in P.GAN_PREREQUISITES}
    res = P.train_gan(config, data.source_train, data.target_train, pretrained, max_steps=10)
    frozen_ok = all(torch.equal(v, before[n][k]) for n in P.GAN_PREREQUISITES
                    for k, v in res.bundle[n].state_dict().items())
    P.run_scenario(config, tmp_path / "rerun", toy_study.root / "data", tmp_path / "fresh-cache")
    first = (toy_study.root / f"gap-{seed}" / "metrics.json").read_bytes()
    again = (tmp_path / "rerun" / "metrics.json").read_bytes()
    report(6, frozen_ok and first == again and res.metrics["steps"] == 10,
           f"frozen blocks bit-identical: {frozen_ok}; seed {seed} metrics.json identical on rerun: {first == again}")


@pytest.mark.slow
def test_07_directional_adaptation(report, toy_study):
    base = mean_accuracy(toy_study.gap, "w/o Adapt")
    ours = mean_accuracy(toy_study.gap, "Ours")
    minutes = toy_study.gap_seconds / 60
    per_seed = ", ".join(f"seed {s}: {100 * m['results']['w/o Adapt']['accuracy']:.1f} -> "
                         f"{100 * m['results']['Ours']['accuracy']:.1f}" for s, m in toy_study.gap.items())
    report(7, ours - base >= 5 and minutes < 45,
           f"w/o Adapt {base:.2f}, Ours {ours:.2f}, gain {ours - base:+.2f} pts (need >= 5); "
           f"{minutes:.1f} min on {torch.get_num_threads()} thread(s); {per_seed}")


@pytest.mark.slow
def test_08_no_gap_control(report, toy_study):
    base = mean_accuracy(toy_study.nogap, "w/o Adapt")
    ours = mean_accuracy(toy_study.nogap, "Ours")
    report(8, abs(ours - base) <= 3, f"w/o Adapt {base:.2f}, Ours {ours:.2f}, |diff| {abs(ours - base):.2f} pts (need <= 3)")


@pytest.mark.slow
def test_09_ablation_ordering(report, toy_study):
    acc = {row: mean_accuracy(toy_study.gap, row) for row in ("only AE", "AE+L", "Ours")}
    ok = (acc["Ours"] >= acc["AE+L"] - 1 and acc["AE+L"] >= acc["only AE"] - 1
          and acc["Ours"] - acc["only AE"] >= 2)
    report(9, ok, ", ".join(f"{k} {v:.2f}" for k, v in acc.items()))


@pytest.mark.slow
def test_10_synthetic_contracts(report, toy_study):
    problems = []
    lines = []
    for seed in STUDY_SEEDS:
        kept = toy_study.kept[seed]
        source = kept["data"].source_train
        synth = kept["synthetic-full"]
        spo = toy_study.config.samples_per_object
        if not np.array_equal(np.bincount(synth.labels), np.bincount(source.labels) * spo):
            problems.append(f"seed {seed}: label counts differ")
        if synth.points.shape[1:] != (toy_study.config.cloud_size, 3):
            problems.append(f"seed {seed}: cloud size {synth.points.shape[1]}")
        shape = toy_study.gap[seed]["shape_preservation"]["full"]
        if not shape["synthetic_to_source"] < shape["random_source_pairs"]:
            problems.append(f"seed {seed}: synthetic clouds drift further than random pairs")
        lines.append(f"seed {seed}: {shape['synthetic_to_source']:.4f} < {shape['random_source_pairs']:.4f}")
    report(10, not problems, "; ".join(problems or lines))


def test_11_reporting(report):
    a, b = compare_scenarios(reference_reports()), compare_scenarios(reference_reports())
    cells_ok = all([a.rows[row][c] for c in TABLE_COLUMNS] == [f"{v:.1f}" for v in vals]
                   for row, vals in REFERENCE_TABLE.items())
    note = [n for n in a.notes if "48.15" in n]
    ok = cells_ok and a.text.encode() == b.text.encode() and bool(note)
    report(11, ok, f"reference cells reproduced: {cells_ok}; byte-stable: {a.text == b.text}; note: {note[:1]}")

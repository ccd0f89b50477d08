import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svquant.analysis import (
    analyze,
    correlation_check,
    histograms_csv,
    layer_histogram,
    layer_report,
    LayerRecord,
    write_analysis,
)
from svquant.models import ModelConfig, build_model, describe_layers
from svquant.quantizer import QuantizerConfig, normalize, quant_error, quantize


@pytest.fixture(scope="module")
def small():
    cfg = ModelConfig(channels=8, embedding_dim=8, n_speakers=3, seed=4)
    return cfg, build_model(cfg)


class TestHistogram:
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["uniform", "pot"]), st.integers(2, 8))
    def test_masses_sum_to_one(self, seed, scheme, bits):
        w = np.random.default_rng(seed).standard_t(3, size=300)
        h = layer_histogram(w, QuantizerConfig(scheme, bits, 2.0))
        assert h.pre.sum() == pytest.approx(1.0) and h.post.sum() == pytest.approx(1.0)
        assert len(h.centers) == 101

    def test_post_mass_only_on_level_bins(self):
        cfg = QuantizerConfig("uniform", 2, 1.0)
        h = layer_histogram(np.linspace(-3, 3, 500), cfg, bins=4)
        # 2-bit levels are -1, 0, 1: outer bins and the two centre bins share 0
        assert h.post[0] > 0 and h.post[-1] > 0
        assert h.post.sum() == pytest.approx(1.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            layer_histogram([], QuantizerConfig("uniform", 4))


class TestLayerReport:
    def test_records_match_descriptors(self, small):
        cfg, model = small
        recs = layer_report(model, cfg, "uniform", 4)
        descs = [d for d in describe_layers(cfg) if d.params]
        assert [r.name for r in recs] == [d.name for d in descs]
        assert sum(r.params for r in recs) == sum(d.params for d in descs)
        assert sum(r.params for r in recs) == sum(p.size for p in model.parameters())

    def test_error_decreases_with_bits(self, small):
        cfg, model = small
        errs = {b: [r.avg_error for r in layer_report(model, cfg, "uniform", b) if r.quantized] for b in (2, 4, 8)}
        for e2, e4, e8 in zip(errs[2], errs[4], errs[8]):
            assert e8 < e4 < e2

    def test_needs_scheme_without_quantization(self, small):
        cfg, model = small
        with pytest.raises(ValueError, match="no scheme"):
            layer_report(model, cfg)

    def test_uses_layer_quantizer(self):
        cfg = ModelConfig(channels=4, embedding_dim=4, n_speakers=2)
        model = build_model(cfg)
        for _, layer in model.named_modules():
            if hasattr(layer, "enable_quantization"):
                layer.enable_quantization("pot", 3, 1.5)
        recs = [r for r in layer_report(model, cfg) if r.quantized]
        assert {(r.scheme, r.bits, r.alpha) for r in recs} == {("pot", 3, 1.5)}


class TestCorrelation:
    def test_perfect(self):
        recs = [LayerRecord(f"l{i}", "fc", p, 0, "uniform", 4, 3.0, e, e * p) for i, (p, e) in
                enumerate([(10, 0.1), (20, 0.2), (30, 0.5)])]
        assert correlation_check(recs) == pytest.approx(1.0)

    def test_too_few(self):
        with pytest.raises(ValueError):
            correlation_check([LayerRecord("a", "fc", 1, 1, "uniform", 4, 3.0, 0.1, 0.1)])


def test_outputs(tmp_path, small):
    cfg, model = small
    records, hists, rho = analyze(model, cfg, "pot", 4)
    assert -1 <= rho <= 1
    write_analysis(records, hists, rho, tmp_path / "a.json", tmp_path / "h.csv")
    body = json.loads((tmp_path / "a.json").read_text())
    assert len(body["layers"]) == len(records)
    assert body["spearman_params_vs_error"] == pytest.approx(rho)
    rows = list(csv.DictReader(io.StringIO((tmp_path / "h.csv").read_text())))
    assert set(rows[0]) == {"layer", "bin_center", "pre_mass", "post_mass"}
    assert len(rows) == 101 * len(hists)
    assert histograms_csv({}) == "layer,bin_center,pre_mass,post_mass\n"


def test_reversed_ordering():
    recs = [LayerRecord(f"l{i}", "fc", p, 0, "uniform", 4, 3.0, e, 0.0) for i, (p, e) in
            enumerate([(10, 0.5), (20, 0.2), (30, 0.1)])]
    assert correlation_check(recs) == pytest.approx(-1.0)


def test_histogram_support_within_unit_interval():
    h = layer_histogram(np.random.default_rng(0).normal(size=1000) * 50, QuantizerConfig("pot", 4, 2.0))
    assert h.edges[0] == -1.0 and h.edges[-1] == 1.0
    # clipping puts the saturated mass in the outermost bins rather than dropping it
    assert h.pre.sum() == pytest.approx(1.0, abs=1e-12)


def test_fresh_model_error_matches_monte_carlo(small):
    cfg, model = small
    # oracle: fresh weights are i.i.d. normal, so after normalization each element
    # behaves like z ~ N(0, 1) measured against the level nearest to clip(z)
    levels = QuantizerConfig("uniform", 4, 3.0).levels.values.astype(np.float64)
    z = np.random.default_rng(11).standard_normal(400_000)
    nearest = levels[np.abs(np.clip(z, -3, 3)[:, None] - levels[None, :]).argmin(axis=1)]
    expected = np.mean((z - nearest) ** 2)
    checked = 0
    for rec in layer_report(model, cfg, "uniform", 4, 3.0):
        if rec.quantized and rec.params >= 1000:
            assert rec.avg_error == pytest.approx(expected, rel=0.05)
            checked += 1
    assert checked


def test_ecapa_block_boundaries_hold_most_params():
    convs = [d for d in describe_layers(ModelConfig(channels=64)) if d.kind == "conv1d"]
    biggest = sorted(convs, key=lambda d: d.params)[-2:]
    assert {d.name for d in biggest} == {convs[0].name, convs[-1].name}


def _pot_minus_uniform(w, bits=4):
    # clip value covering the normalized data, so level placement rather than clipping decides
    alpha = float(np.quantile(np.abs(normalize(w)[0]), 0.999))
    err = {s: quant_error(w, quantize(w, QuantizerConfig(s, bits, alpha))).average for s in ("uniform", "pot")}
    return err["pot"] - err["uniform"]


@pytest.mark.parametrize("dist", ["laplace", "student-t", "spike-and-slab"])
def test_pot_wins_on_peaked_weights(dist):
    r = np.random.default_rng(0)
    n = 20000
    w = {
        "laplace": r.laplace(size=n),
        "student-t": r.standard_t(3, n),
        "spike-and-slab": np.where(r.random(n) < 0.9, r.normal(0, 0.1, n), r.normal(0, 1, n)),
    }[dist]
    assert _pot_minus_uniform(w) < 0


def test_uniform_wins_on_flat_weights():
    assert _pot_minus_uniform(np.random.default_rng(0).uniform(-1, 1, 20000)) > 0

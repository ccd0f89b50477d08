"""Per-layer weight diagnostics: histograms, parameter counts, quantization error, MACs."""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from ._io import atomic_write
from .layers import BatchNorm, QuantizableLayer
from .models import describe_layers
from .quantizer import QuantizerConfig, clip, normalize, project, quant_error, quantize

DEFAULT_BINS = 101


@dataclass
class Histogram:
    edges: np.ndarray
    pre: np.ndarray
    post: np.ndarray

    @property
    def centers(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def layer_histogram(weights, cfg, bins=DEFAULT_BINS):
    """Mass histograms of clipped weights scaled to [-1, 1], before and after projection."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0:
        raise ValueError("empty layer")
    w_norm, _, _ = normalize(w)
    clipped = clip(w_norm, cfg.alpha)
    levels = project(clipped, cfg.levels).values()
    edges = np.linspace(-1.0, 1.0, bins + 1)
    pre, _ = np.histogram(clipped / cfg.alpha, bins=edges)
    post, _ = np.histogram(levels / np.float32(cfg.alpha), bins=edges)
    return Histogram(edges, pre / w.size, post / w.size)


@dataclass
class LayerRecord:
    name: str
    kind: str
    params: int
    macs: int
    scheme: str = None
    bits: int = None
    alpha: float = None
    avg_error: float = None
    total_error: float = None
    kurtosis: float = None

    @property
    def quantized(self):
        return self.avg_error is not None


def layer_report(model, model_cfg, scheme=None, bits=None, alpha=None, frames=200):
    """One record per parameterized layer, in module order.

    Conv/FC layers get quantization statistics: layers with active fake
    quantization use their own scheme, bits and learned alpha unless
    overridden; others use the arguments (alpha defaults to 3).
    """
    descs = {d.name: d for d in describe_layers(model_cfg, frames)}
    out = []
    for prefix, layer in model.named_modules():
        name = prefix.rstrip(".")
        if isinstance(layer, BatchNorm):
            d = descs[name]
            out.append(LayerRecord(name, d.kind, d.params, d.macs))
            continue
        if not isinstance(layer, QuantizableLayer):
            continue
        d = descs[name]
        own = layer.quant
        s = scheme if scheme is not None else (own[0] if own else None)
        b = bits if bits is not None else (own[1] if own else None)
        a = alpha if alpha is not None else (float(own[2].data[0]) if own else 3.0)
        if s is None or b is None:
            raise ValueError(f"no scheme/bits for layer {name}")
        w = layer.weight.data
        cfg = QuantizerConfig(s, b, a)
        err = quant_error(w, quantize(w, cfg))
        w_norm, _, _ = normalize(w)
        kurt = float(stats.kurtosis(w_norm.reshape(-1).astype(np.float64)))
        out.append(LayerRecord(name, d.kind, d.params, d.macs, cfg.scheme.value, cfg.bits, cfg.alpha,
                               err.average, err.total, kurt))
    return out


def correlation_check(records):
    """Spearman rank correlation between parameter count and average error."""
    rows = [r for r in records if r.quantized]
    if len(rows) < 3:
        raise ValueError("correlation needs at least 3 quantized layers")
    rho = stats.spearmanr([r.params for r in rows], [r.avg_error for r in rows]).statistic
    return float(rho)


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def report_json(records, extra=None):
    body = {"layers": [{k: _clean(v) for k, v in asdict(r).items()} for r in records]}
    if extra:
        body.update(extra)
    return json.dumps(body, indent=2)


def histograms_csv(histograms):
    """CSV text with columns ``layer, bin_center, pre_mass, post_mass``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "bin_center", "pre_mass", "post_mass"])
    for name, h in histograms.items():
        for c, a, b in zip(h.centers, h.pre, h.post):
            writer.writerow([name, f"{c:.6f}", f"{a:.10g}", f"{b:.10g}"])
    return buf.getvalue()


def analyze(model, model_cfg, scheme=None, bits=None, alpha=None, bins=DEFAULT_BINS):
    """Records, histograms and the param/error rank correlation for a model."""
    records = layer_report(model, model_cfg, scheme, bits, alpha)
    layers = dict((p.rstrip("."), m) for p, m in model.named_modules())
    hists = {
        r.name: layer_histogram(layers[r.name].weight.data, QuantizerConfig(r.scheme, r.bits, r.alpha), bins)
        for r in records
        if r.quantized
    }
    rho = correlation_check(records) if sum(r.quantized for r in records) >= 3 else None
    return records, hists, rho


def write_analysis(records, hists, rho, json_path, csv_path):
    atomic_write(json_path, report_json(records, {"spearman_params_vs_error": _clean(rho)}).encode())
    atomic_write(csv_path, histograms_csv(hists).encode())

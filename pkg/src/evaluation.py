"""
Evaluation protocols over a test set.

A completer maps a masked Sample to all N domains in [0, 1]. The model, the
imputation baselines and the ground-truth oracle all share that interface so
the same protocol runners and segmentation scoring apply to each of them.
"""
import itertools
import logging
from collections.abc import Iterable
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field

from .config import Baseline, MaskMode, ProtocolError, SegInput
from .data import Sample, sample_visibility
from .imputation import NearestNeighborIndex, impute_average, impute_zero
from .metrics import dice_score, mae, nrmse, psnr, ssim
from .remic_model import ReMIC, StylePolicy

logger = logging.getLogger(__name__)

METRICS = ("mae", "nrmse", "psnr", "ssim")
SCOPES = ("all", "missing")


class Completer(Protocol):
    name: str

    def complete(self, sample: Sample) -> np.ndarray: ...


class ModelCompleter:
    def __init__(self, model: ReMIC, policy: StylePolicy | None = None, name: str = "remic"):
        self.model = model
        self.policy = policy or StylePolicy()
        self.name = name

    def complete(self, sample: Sample) -> np.ndarray:
        return self.model.complete_missing(sample, self.policy)


class ImputationCompleter:
    def __init__(self, baseline: Baseline, train_set: list[Sample] | None = None):
        if baseline is Baseline.ORACLE:
            raise ProtocolError("Use OracleCompleter for ground-truth completion.")
        self.baseline = baseline
        self.name = baseline.value
        self._index = NearestNeighborIndex(train_set or []) if baseline is Baseline.NN else None

    def complete(self, sample: Sample) -> np.ndarray:
        match self.baseline:
            case Baseline.ZERO:
                return impute_zero(sample)
            case Baseline.AVERAGE:
                return impute_average(sample)
            case Baseline.NN:
                return self._index.impute(sample)
        raise ProtocolError(f"Unknown baseline {self.baseline}.")


class OracleCompleter:
    """Returns the ground truth for every domain."""

    name = "oracle"

    def complete(self, sample: Sample) -> np.ndarray:
        return sample.images.copy()


def make_completer(baseline: Baseline, train_set: list[Sample] | None = None) -> Completer:
    if baseline is Baseline.ORACLE:
        return OracleCompleter()
    return ImputationCompleter(baseline, train_set)


def fill_missing(sample: Sample, completed: np.ndarray) -> np.ndarray:
    """Real images where visible, completed ones where missing."""
    return np.where(sample.visibility[:, None, None], sample.images, completed).astype(np.float32)


class Segmenter:
    """Scores a trained segmentor on the output of any completer."""

    def __init__(self, model: ReMIC, seg_input: SegInput | None = None):
        if model.segmentor is None:
            raise ProtocolError("Segmentation scoring needs a model trained with a segmentor.")
        self.model = model
        self.seg_input = seg_input or model.config.seg_input

    def predict(self, sample: Sample, completer: Completer) -> np.ndarray:
        if self.seg_input is SegInput.ZERO_FILLED and isinstance(completer, ModelCompleter):
            return self.model.segment_sample(sample.images, sample.visibility)
        images = fill_missing(sample, completer.complete(sample))
        return self.model.segment_sample(images, np.ones(sample.num_domains, dtype=bool))

    def score(self, sample: Sample, completer: Completer) -> np.ndarray:
        if sample.seg_mask is None:
            raise ProtocolError(f"Sample '{sample.id}' has no segmentation mask.")
        scores, _ = dice_score(self.predict(sample, completer), sample.seg_mask, self.model.config.num_classes)
        return scores


class MetricsReport(BaseModel):
    """Per-domain means of every metric over the scored samples, plus optional Dice."""

    model_config = ConfigDict(extra="forbid")

    method: str
    protocol: str
    sample_count: int = Field(gt=0)
    domains: list[int]
    mae: dict[int, float]
    nrmse: dict[int, float]
    psnr: dict[int, float]
    ssim: dict[int, float]
    dice: list[float] | None = None
    dice_mean: float | None = None
    config: dict[str, str] = Field(default_factory=dict)

    def mean(self, metric: str) -> float:
        values = getattr(self, metric)
        return float(np.mean([values[d] for d in self.domains]))

    def to_kv(self) -> str:
        lines = [f"method={self.method}", f"protocol={self.protocol}", f"samples={self.sample_count}",
                 f"domains={','.join(str(d) for d in self.domains)}"]
        for metric in METRICS:
            values = getattr(self, metric)
            lines += [f"{metric}.{d}={values[d]!r}" for d in self.domains]
        if self.dice is not None:
            lines += [f"dice.{label}={value!r}" for label, value in enumerate(self.dice)]
            lines.append(f"dice.mean={self.dice_mean!r}")
        lines += [f"config.{key}={value}" for key, value in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, values: dict[str, str | None]) -> "MetricsReport":
        try:
            domains = [int(d) for d in values["domains"].split(",") if d]
            fields = dict(
                method=values["method"],
                protocol=values["protocol"],
                sample_count=int(values["samples"]),
                domains=domains,
            )
            for metric in METRICS:
                fields[metric] = {d: float(values[f"{metric}.{d}"]) for d in domains}
        except (KeyError, AttributeError, ValueError) as e:
            raise ProtocolError(f"Malformed report: missing or invalid entry {e}.") from e
        dice_keys = sorted((k for k in values if k.startswith("dice.") and k != "dice.mean"),
                           key=lambda k: int(k.split(".")[1]))
        if dice_keys:
            fields["dice"] = [float(values[k]) for k in dice_keys]
            fields["dice_mean"] = float(values["dice.mean"])
        fields["config"] = {k[len("config."):]: v or "" for k, v in values.items() if k.startswith("config.")}
        return cls(**fields)

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "report.kv"
        path.write_text(self.to_kv())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.kv"
        if not path.exists():
            raise FileNotFoundError(f"Report not found: {path}")
        return cls.from_kv(dotenv_values(path, interpolate=False))


class ProtocolSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: MaskMode
    value: int

    @classmethod
    def parse(cls, text: str) -> "ProtocolSpec":
        """'single-missing:<domain>' or 'random-k:<k>'."""
        name, _, arg = text.partition(":")
        kinds = {"single-missing": MaskMode.SINGLE_MISSING, "random-k": MaskMode.FIXED_K}
        if name not in kinds or not arg.lstrip("-").isdigit():
            raise ProtocolError(f"Unknown protocol '{text}'. Use single-missing:<domain> or random-k:<k>.")
        return cls(kind=kinds[name], value=int(arg))

    def __str__(self) -> str:
        name = "single-missing" if self.kind is MaskMode.SINGLE_MISSING else "random-k"
        return f"{name}:{self.value}"


def _score_rows(sample: Sample, completed: np.ndarray, domains: Iterable[int]) -> list[dict]:
    rows = []
    for d in domains:
        generated, truth = completed[d], sample.images[d]
        rows.append(dict(
            sample=sample.id,
            domain=d,
            mae=mae(generated, truth),
            nrmse=nrmse(generated, truth),
            psnr=psnr(generated, truth),
            ssim=ssim(generated, truth),
        ))
    return rows


def _build_report(method: str, protocol: str, rows: list[dict], dice_rows: list[np.ndarray],
                  config: dict[str, str] | None) -> MetricsReport:
    if not rows:
        raise ProtocolError(f"Protocol {protocol} scored no samples.")
    frame = pd.DataFrame(rows)
    means = frame.groupby("domain", sort=True)[list(METRICS)].mean()
    domains = [int(d) for d in means.index]
    fields = {metric: {d: float(means.loc[d, metric]) for d in domains} for metric in METRICS}
    dice = dice_mean = None
    if dice_rows:
        per_class = np.mean(np.stack(dice_rows), axis=0)
        dice = [float(v) for v in per_class]
        dice_mean = float(per_class[1:].mean())
    return MetricsReport(
        method=method,
        protocol=protocol,
        sample_count=frame["sample"].nunique(),
        domains=domains,
        dice=dice,
        dice_mean=dice_mean,
        config=config or {},
        **fields,
    )


def run_protocol_single_missing(
    completer: Completer,
    test_set: list[Sample],
    missing: int,
    segmenter: Segmenter | None = None,
    config: dict[str, str] | None = None,
) -> MetricsReport:
    """Mask domain `missing` in every test sample and score that domain only."""
    if not test_set:
        raise ProtocolError("The test set is empty.")
    num_domains = test_set[0].num_domains
    if not 0 <= missing < num_domains:
        raise ProtocolError(f"Missing domain {missing} is out of range for {num_domains} domains.")
    flags = sample_visibility(num_domains, MaskMode.SINGLE_MISSING, np.random.default_rng(0), missing=missing)
    rows, dice_rows = [], []
    for sample in test_set:
        masked = sample.with_visibility(flags)
        rows += _score_rows(sample, completer.complete(masked), [missing])
        if segmenter is not None:
            dice_rows.append(segmenter.score(masked, completer))
    logger.info("%s single-missing:%d scored %d samples", completer.name, missing, len(test_set))
    return _build_report(completer.name, f"single-missing:{missing}", rows, dice_rows, config)


def run_protocol_random_k(
    completer: Completer,
    test_set: list[Sample],
    k: int,
    seed: int = 0,
    scope: str = "all",
    exhaustive: bool = False,
    segmenter: Segmenter | None = None,
    config: dict[str, str] | None = None,
) -> MetricsReport:
    """Keep k visible domains per sample and score the generated images.

    Subsets are drawn uniformly with `seed`, or every k-subset is visited in
    lexicographic order when `exhaustive`. `scope` picks which outputs are
    scored: all N, or only the masked ones.
    """
    if not test_set:
        raise ProtocolError("The test set is empty.")
    num_domains = test_set[0].num_domains
    if not 1 <= k <= num_domains - 1:
        raise ProtocolError(f"k must be between 1 and {num_domains - 1}, got {k}.")
    if scope not in SCOPES:
        raise ProtocolError(f"Unknown scope '{scope}'. Use one of: {', '.join(SCOPES)}.")
    rng = np.random.default_rng(seed)
    rows, dice_rows = [], []
    for sample in test_set:
        if exhaustive:
            subsets = [np.isin(np.arange(num_domains), c) for c in itertools.combinations(range(num_domains), k)]
        else:
            subsets = [sample_visibility(num_domains, MaskMode.FIXED_K, rng, k=k)]
        for flags in subsets:
            masked = sample.with_visibility(flags)
            scored = range(num_domains) if scope == "all" else np.flatnonzero(~flags)
            rows += _score_rows(sample, completer.complete(masked), scored)
            if segmenter is not None:
                dice_rows.append(segmenter.score(masked, completer))
    protocol = f"random-k:{k}"
    logger.info("%s %s (scope %s%s) scored %d samples", completer.name, protocol, scope,
                ", exhaustive" if exhaustive else "", len(test_set))
    return _build_report(completer.name, protocol, rows, dice_rows, config)


def run_protocol(
    completer: Completer,
    test_set: list[Sample],
    protocol: ProtocolSpec,
    seed: int = 0,
    scope: str = "all",
    exhaustive: bool = False,
    segmenter: Segmenter | None = None,
    config: dict[str, str] | None = None,
) -> MetricsReport:
    if protocol.kind is MaskMode.SINGLE_MISSING:
        return run_protocol_single_missing(completer, test_set, protocol.value, segmenter, config)
    return run_protocol_random_k(completer, test_set, protocol.value, seed, scope, exhaustive, segmenter, config)

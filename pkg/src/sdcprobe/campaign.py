"""Seeded injection campaigns: run, classify, persist, summarize.

A campaign draws fault sites from a sampler, evaluates the model once per
fault, and classifies each outcome against a ladder of SDC thresholds
(drop >= t on absolute accuracy vs the fault-free baseline).  Records are
deterministic for a given config because every draw ordinal owns its RNG
stream; worker count and scheduling cannot change them.  Only wallclock_ns
varies between runs.

Records persist as append-friendly CSV plus a .meta.json sidecar carrying
the full config and model checksum, enough to rerun the exact campaign.
"""

from __future__ import annotations

import json
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, DataIntegrityError, UsageError
from .fault_model import (ExperimentCode, FaultSite, SamplerConfig, build_sampler,
                          enumerate_sites, parse_code)
from .injector import evaluate_with_fault
from .nnet import evaluate_detailed, model_checksum

ARTIFACT_VERSION = 1
DEFAULT_THRESHOLDS = tuple(round(i * 0.05, 2) for i in range(19))  # 0.00 .. 0.90
DEFAULT_SEEDS = (11, 23, 37, 47, 59)
DEFAULT_BUDGET = 2000

_FIXED_COLUMNS = ["experiment_code", "seed", "sample_ordinal", "layer_id",
                  "target_kind", "element_index", "bit_index", "baseline_acc",
                  "faulty_acc", "acc_drop", "poisoned", "wallclock_ns"]


def threshold_column(t: float) -> str:
    return f"sdc_{round(t * 100):03d}"


@dataclass(frozen=True)
class InjectionRecord:
    experiment_code: str
    seed: int
    sample_ordinal: int
    site: FaultSite
    baseline_accuracy: float
    faulty_accuracy: float
    accuracy_drop: float
    poisoned: bool
    wallclock_ns: int
    sdc_flags: tuple

    def sort_key(self):
        return (self.seed, self.sample_ordinal)


def make_record(code, seed, ordinal, site, baseline, faulty, poisoned,
                wallclock_ns, thresholds) -> InjectionRecord:
    drop = float(baseline) - float(faulty)
    flags = tuple(bool(drop >= t) for t in thresholds)
    return InjectionRecord(str(code), seed, ordinal, site, float(baseline),
                           float(faulty), drop, bool(poisoned),
                           int(wallclock_ns), flags)


@dataclass
class CampaignConfig:
    code: ExperimentCode
    thresholds: tuple = DEFAULT_THRESHOLDS
    sample_budget: int = DEFAULT_BUDGET
    seeds: tuple = DEFAULT_SEEDS
    uniform_mix: float = 0.0
    workers: int = 1
    exhaustive: bool = False

    def __post_init__(self):
        if isinstance(self.code, str):
            self.code = parse_code(self.code)
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds:
            raise ConfigError("thresholds must be nonempty")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("thresholds must be sorted ascending")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ConfigError("thresholds must lie in [0, 1]")
        cols = [threshold_column(t) for t in self.thresholds]
        if len(set(cols)) != len(cols):
            raise ConfigError("thresholds must be distinct at 0.01 resolution")
        if self.sample_budget < 0:
            raise ConfigError(f"sample_budget must be >= 0, got {self.sample_budget}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.uniform_mix <= 1.0:
            raise ConfigError(f"uniform_mix must be in [0, 1], got {self.uniform_mix}")

    def to_json_dict(self):
        return {"experiment_code": str(self.code),
                "thresholds": list(self.thresholds),
                "sample_budget": self.sample_budget,
                "seeds": list(self.seeds),
                "uniform_mix": self.uniform_mix,
                "workers": self.workers,
                "exhaustive": self.exhaustive}


@dataclass
class CampaignStats:
    thresholds: tuple
    positives_true: list
    positives_false: list
    precision: list  # None where no records


@dataclass
class CampaignResult:
    config: CampaignConfig
    records: list
    stats: CampaignStats
    baseline_accuracy: float


def compute_stats(records, thresholds) -> CampaignStats:
    n = len(records)
    pt, pf, prec = [], [], []
    for i, _ in enumerate(thresholds):
        hits = sum(1 for r in records if r.sdc_flags[i])
        pt.append(hits)
        pf.append(n - hits)
        prec.append(hits / n if n else None)
    return CampaignStats(tuple(thresholds), pt, pf, prec)


def running_precision(records, threshold_index) -> np.ndarray:
    """Cumulative precision after each sample of one ordinal-sorted stream."""
    flags = np.array([r.sdc_flags[threshold_index] for r in records], dtype=np.float64)
    if flags.size == 0:
        return flags
    return np.cumsum(flags) / np.arange(1, flags.size + 1)


def census_from_records(records, thresholds) -> dict:
    """Distinct SDC-causing sites per threshold, keyed by threshold value."""
    census = {t: set() for t in thresholds}
    for r in records:
        for i, t in enumerate(thresholds):
            if r.sdc_flags[i]:
                census[t].add(r.site)
    return census


def compute_recall(records, thresholds, census) -> list:
    """Recall per threshold: distinct flagged sites over the census count.

    census maps threshold -> site set or plain count.  A census smaller
    than the observed distinct positives is impossible by construction and
    rejected as corrupt.
    """
    hits = census_from_records(records, thresholds)
    out = []
    for t in thresholds:
        if t not in census:
            raise UsageError(f"census lacks threshold {t}")
        size = census[t] if isinstance(census[t], int) else len(census[t])
        observed = len(hits[t])
        if size < observed:
            raise DataIntegrityError(
                f"threshold {t}: census of {size} sites is smaller than "
                f"{observed} observed distinct positives")
        out.append(observed / size if size else None)
    return out


class _RecordSink:
    """Serialized, in-order record writer with a resumable .part file.

    Rows are flushed to `<path>.part` strictly in (seed, ordinal) order, so
    a crash leaves a clean prefix; `finalize` renames the whole file into
    place atomically and writes the meta sidecar.
    """

    def __init__(self, path, thresholds, meta):
        self.path = str(path)
        self.part = self.path + ".part"
        self.thresholds = tuple(thresholds)
        self.meta = meta
        self.done = []
        self._fh = None

    def resume_prefix(self, expected_order):
        """Records already present in the part file, validated as a prefix
        of the campaign's canonical (seed, ordinal) order."""
        if not os.path.exists(self.part):
            return []
        records, thresholds = load_records(self.part)
        if thresholds != self.thresholds:
            raise DataFormatError(f"{self.part}: thresholds differ from the config; "
                                  "delete the part file to restart")
        keys = [r.sort_key() for r in records]
        if keys != list(expected_order[:len(keys)]):
            raise DataFormatError(f"{self.part}: rows are not a clean prefix of this "
                                  "campaign; delete the part file to restart")
        self.done = records
        return records

    def _open(self):
        if self._fh is None:
            new = not os.path.exists(self.part)
            self._fh = open(self.part, "a", encoding="utf-8", newline="")
            if new:
                self._fh.write(",".join(_FIXED_COLUMNS +
                                        [threshold_column(t) for t in self.thresholds]) + "\n")
                self._fh.flush()

    def append(self, record):
        self._open()
        self._fh.write(_format_row(record) + "\n")
        self._fh.flush()
        self.done.append(record)

    def finalize(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        save_records(self.done, self.thresholds, self.path, meta=self.meta)
        if os.path.exists(self.part):
            os.remove(self.part)

    def abort(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _format_row(r: InjectionRecord) -> str:
    cells = [r.experiment_code, str(r.seed), str(r.sample_ordinal),
             str(r.site.layer_id), r.site.target_kind, str(r.site.element_index),
             str(r.site.bit_index), repr(r.baseline_accuracy),
             repr(r.faulty_accuracy), repr(r.accuracy_drop),
             str(int(r.poisoned)), str(r.wallclock_ns)]
    cells += [str(int(f)) for f in r.sdc_flags]
    return ",".join(cells)


def save_records(records, thresholds, path, meta=None):
    """Atomic CSV write, rows sorted by (seed, ordinal); optional sidecar."""
    rows = sorted(records, key=InjectionRecord.sort_key)
    header = ",".join(_FIXED_COLUMNS + [threshold_column(t) for t in thresholds])
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(_format_row(r) + "\n")
    os.replace(tmp, path)
    if meta is not None:
        write_meta_sidecar(path, meta)


def meta_path_for(path) -> str:
    base, _ = os.path.splitext(str(path))
    return base + ".meta.json"


def write_meta_sidecar(path, meta):
    target = meta_path_for(path)
    tmp = f"{target}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, target)


def load_records(path):
    """Parse a records CSV; returns (records, thresholds).

    SDC flags are revalidated against the stored accuracies; a mismatch
    means the file was edited and is rejected.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty records file")
    names = lines[0].split(",")
    if names[:len(_FIXED_COLUMNS)] != _FIXED_COLUMNS:
        raise DataFormatError(f"{path}: unexpected header {lines[0]!r}")
    thresholds = []
    for name in names[len(_FIXED_COLUMNS):]:
        if not name.startswith("sdc_") or not name[4:].isdigit():
            raise DataFormatError(f"{path}: bad threshold column {name!r}")
        thresholds.append(int(name[4:]) / 100)
    thresholds = tuple(thresholds)
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split(",")
        if len(cells) != len(names):
            raise DataFormatError(f"{path}:{lineno}: expected {len(names)} cells, "
                                  f"got {len(cells)}")
        try:
            site = FaultSite(int(cells[3]), cells[4], int(cells[5]), int(cells[6]))
            rec = make_record(cells[0], int(cells[1]), int(cells[2]), site,
                              float(cells[7]), float(cells[8]), bool(int(cells[10])),
                              int(cells[11]), thresholds)
        except (ValueError, UsageError) as exc:
            raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
        stored_drop = float(cells[9])
        stored_flags = tuple(bool(int(c)) for c in cells[12:])
        if stored_drop != rec.accuracy_drop or stored_flags != rec.sdc_flags:
            raise DataIntegrityError(f"{path}:{lineno}: stored drop/flags do not "
                                     "match the stored accuracies")
        records.append(rec)
    return records, thresholds


class _ExhaustiveSampler:
    """Replays the full site enumeration in order; the 100%-budget mode."""

    def __init__(self, sites):
        self.sites = sites

    def sample_at(self, k):
        return self.sites[k]


def _campaign_meta(config, model, dataset, baseline):
    return {"artifact_version": ARTIFACT_VERSION,
            "kind": "campaign_records",
            "config": config.to_json_dict(),
            "model_checksum": model_checksum(model),
            "baseline_accuracy": baseline,
            "dataset": {"split": dataset.split, "samples": len(dataset)},
            "sampler": "two-stage (neuron stage, then bit stage); "
                       "per-ordinal rng streams seeded by (seed, ordinal)"}


def run_campaign(model, dataset, config: CampaignConfig, attributions=None,
                 out_csv=None, samplers=None, probe_images=None,
                 resume=True) -> CampaignResult:
    """Run the campaign and return all records plus pooled stats.

    Workers share a queue of draw ordinals and own private model replicas;
    records do not depend on the worker count.  With out_csv set, rows are
    flushed in order to `<out_csv>.part` as they complete, and an existing
    part file from an interrupted run is picked up where it stopped.
    """
    baseline, _ = evaluate_detailed(model, dataset)

    if config.exhaustive:
        sites = enumerate_sites(model, config.code.target_kind)
        plan = [(config.seeds[0], _ExhaustiveSampler(sites), len(sites))]
    else:
        plan = []
        for seed in sorted(config.seeds):
            if samplers is not None:
                sampler = samplers[seed]
            else:
                sampler = build_sampler(
                    SamplerConfig(code=config.code, uniform_mix=config.uniform_mix,
                                  seed=seed),
                    attributions, model, probe_images=probe_images)
            plan.append((seed, sampler, config.sample_budget))

    expected_order = [(seed, k) for seed, _, budget in plan for k in range(budget)]
    sink = None
    records = []
    if out_csv is not None:
        sink = _RecordSink(out_csv, config.thresholds,
                           _campaign_meta(config, model, dataset, baseline))
        if resume:
            records = list(sink.resume_prefix(expected_order))
    done_keys = {r.sort_key() for r in records}

    tls = threading.local()

    def replica():
        m = getattr(tls, "model", None)
        if m is None:
            m = model.copy()
            tls.model = m
        return m

    code_str = str(config.code)

    def run_one(seed, sampler, k):
        t0 = time.perf_counter_ns()
        site = sampler.sample_at(k)
        faulty, poisoned = evaluate_with_fault(replica(), dataset, site)
        elapsed = time.perf_counter_ns() - t0
        return make_record(code_str, seed, k, site, baseline, faulty, poisoned,
                           elapsed, config.thresholds)

    try:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            for seed, sampler, budget in plan:
                pending = [k for k in range(budget) if (seed, k) not in done_keys]
                futures = {k: pool.submit(run_one, seed, sampler, k) for k in pending}
                for k in pending:  # collect in ordinal order so flushes stay sorted
                    rec = futures[k].result()
                    records.append(rec)
                    if sink is not None:
                        sink.append(rec)
    except BaseException:
        if sink is not None:
            sink.abort()  # part file keeps the flushed prefix for resume
        raise

    records.sort(key=InjectionRecord.sort_key)
    if sink is not None:
        sink.done = records
        sink.finalize()
    stats = compute_stats(records, config.thresholds)
    return CampaignResult(config, records, stats, baseline)


def exhaustive_census(model, dataset, target_kind, thresholds, seed=0) -> dict:
    """Brute-force SDC census: evaluate every fault site once.

    Returns {threshold: set of SDC-causing FaultSites}.  Desk scale only;
    the site count is the model's full search space.
    """
    config = CampaignConfig(code="RBRN" + ("w" if target_kind == "neuron_weight" else "o"),
                            thresholds=thresholds, seeds=(seed,), exhaustive=True)
    result = run_campaign(model, dataset, config)
    return census_from_records(result.records, thresholds)


@dataclass
class ReportSummary:
    thresholds: tuple
    series_threshold: float
    rows: list = field(default_factory=list)
    # rows: (code, threshold, mean_precision, stddev, n_seeds)
    series: dict = field(default_factory=dict)
    # series: code -> np.ndarray of seed-averaged running precision


def report(records, thresholds, series_threshold=0.05) -> ReportSummary:
    """Per-code summary: seed-averaged precision per threshold plus the
    running precision-vs-samples series at one chosen threshold.

    Precision is computed per seed first, then averaged; the spread column
    is the population standard deviation across seeds.
    """
    thresholds = tuple(thresholds)
    for r in records:
        if len(r.sdc_flags) != len(thresholds):
            raise UsageError("records carry a different threshold ladder than "
                             "the one given; refusing to mix them")
    try:
        series_index = thresholds.index(series_threshold)
    except ValueError:
        raise UsageError(f"series threshold {series_threshold} is not one of the "
                         f"record thresholds") from None

    by_code: dict = {}
    for r in records:
        by_code.setdefault(r.experiment_code, {}).setdefault(r.seed, []).append(r)
    summary = ReportSummary(thresholds, series_threshold)
    for code in sorted(by_code):
        seed_groups = [sorted(group, key=InjectionRecord.sort_key)
                       for _, group in sorted(by_code[code].items())]
        for i, t in enumerate(thresholds):
            per_seed = [compute_stats(g, thresholds).precision[i] for g in seed_groups]
            per_seed = [p for p in per_seed if p is not None]
            if per_seed:
                summary.rows.append((code, t, float(np.mean(per_seed)),
                                     float(np.std(per_seed)), len(per_seed)))
            else:
                summary.rows.append((code, t, None, None, 0))
        runs = [running_precision(g, series_index) for g in seed_groups]
        if runs and min(len(r) for r in runs) > 0:
            length = min(len(r) for r in runs)
            summary.series[code] = np.mean([r[:length] for r in runs], axis=0)
        else:
            summary.series[code] = np.zeros(0)
    return summary


def write_report_csvs(summary: ReportSummary, out_prefix) -> tuple:
    """Write `<prefix>_precision.csv` and `<prefix>_series.csv`; returns paths."""
    prec_path = f"{out_prefix}_precision.csv"
    series_path = f"{out_prefix}_series.csv"
    tmp = f"{prec_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write("experiment_code,threshold,mean_precision,stddev_precision,n_seeds\n")
        for code, t, mean, std, n in summary.rows:
            mean_s = "null" if mean is None else repr(mean)
            std_s = "null" if std is None else repr(std)
            fh.write(f"{code},{t},{mean_s},{std_s},{n}\n")
    os.replace(tmp, prec_path)
    tmp = f"{series_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write("experiment_code,sample_count,running_precision\n")
        for code, series in sorted(summary.series.items()):
            for i, value in enumerate(series, start=1):
                fh.write(f"{code},{i},{value!r}\n")
    os.replace(tmp, series_path)
    return prec_path, series_path

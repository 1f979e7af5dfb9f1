"""Fault-aware training and latency-to-critical measurement.

fat_train warms a model up clean, draws the first few faults from the
configured sampler, then keeps training with those faults active so the
network learns to route around them.  Weight faults persist: the flipped
bit is re-applied after every optimizer step.  Output faults stay
registered on the model for every forward pass.

The latency metric asks how many fault evaluations a sampler needs before
hitting k critical faults in a row; importance-guided samplers find them
sooner.  "Critical" means clamped accuracy drop >= threshold, where drops
below zero clamp to zero so threshold 0.0 is trivially met.  Cycle counts
are proxied by evaluations x test-set size.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .attribution import AttributionConfig, attribute_all
from .campaign import DEFAULT_THRESHOLDS
from .errors import ConfigError
from .fault_model import SamplerConfig, build_sampler, parse_code
from .injector import evaluate_with_fault, evaluate_with_fault_set, inject_set, remove
from .nnet import evaluate_detailed, train
from .nnet.training import EVAL_BATCH

LATENCY_BUDGET_CAP = 10_000


@dataclass
class FatConfig:
    code: object = "GBINo"             # sampler for the trained-on faults
    adversary_code: object = "RBRNo"   # sampler for the comparison fault set
    warmup_epochs: int = 5
    fat_epochs: int = 5
    faults_per_round: int = 5
    consecutive_criticals_required: int = 3
    thresholds: tuple = DEFAULT_THRESHOLDS
    simulations_per_epoch: int = 3     # latency sims after each FAT epoch
    latency_threshold: float = 0.05
    lr: float = 0.01
    batch_size: int = 32
    optimizer: str = "sgd"
    seed: int = 0
    uniform_mix: float = 0.0
    attribution_steps: int = 32
    attribution_sample_count: int | None = None

    def __post_init__(self):
        if isinstance(self.code, str):
            self.code = parse_code(self.code)
        if isinstance(self.adversary_code, str):
            self.adversary_code = parse_code(self.adversary_code)
        for name in ("warmup_epochs", "fat_epochs", "consecutive_criticals_required"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.faults_per_round < 0:
            raise ConfigError("faults_per_round must be >= 0")
        if self.simulations_per_epoch < 0:
            raise ConfigError("simulations_per_epoch must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_json_dict(self):
        return {"code": str(self.code), "adversary_code": str(self.adversary_code),
                "warmup_epochs": self.warmup_epochs, "fat_epochs": self.fat_epochs,
                "faults_per_round": self.faults_per_round,
                "consecutive_criticals_required": self.consecutive_criticals_required,
                "thresholds": list(self.thresholds),
                "simulations_per_epoch": self.simulations_per_epoch,
                "latency_threshold": self.latency_threshold,
                "lr": self.lr, "batch_size": self.batch_size,
                "optimizer": self.optimizer, "seed": self.seed,
                "uniform_mix": self.uniform_mix,
                "attribution_steps": self.attribution_steps,
                "attribution_sample_count": self.attribution_sample_count}


@dataclass
class LatencyResult:
    code: str
    threshold: float
    seed: int
    evaluations_needed: int
    wallclock_ns: int
    censored: bool
    test_set_size: int

    @property
    def cycles(self):
        """Evaluation count scaled by test-set size; the cycle-count proxy."""
        return self.evaluations_needed * self.test_set_size

    def to_json_dict(self):
        return {"code": self.code, "threshold": self.threshold, "seed": self.seed,
                "evaluations_needed": self.evaluations_needed,
                "wallclock_ns": self.wallclock_ns, "censored": self.censored,
                "cycles": self.cycles}


def _sampler_for(model, dataset, code, seed, *, uniform_mix=0.0, steps=32,
                 sample_count=None):
    """Sampler plus the attribution pass it needs; importance codes pay the
    attribution cost here, which is why callers time around this."""
    attributions = None
    if code.needs_attributions:
        cfg = AttributionConfig(target_kind=code.target_kind, steps=steps,
                                sample_count=sample_count, seed=seed)
        attributions = attribute_all(model, dataset, cfg)
    probe = dataset.images[:EVAL_BATCH]
    return build_sampler(SamplerConfig(code=code, uniform_mix=uniform_mix, seed=seed),
                         attributions, model, probe_images=probe)


def measure_latency_to_critical(model, dataset, code, threshold, k=3, *, seed=0,
                                budget_cap=LATENCY_BUDGET_CAP,
                                attribution_steps=32,
                                attribution_sample_count=None,
                                sampler=None) -> LatencyResult:
    """Fault evaluations needed to see k consecutive critical faults.

    Attribution (re)computation for importance codes happens inside the
    timed window, so wallclock_ns reflects the sampler's true cost.  Runs
    past budget_cap evaluations return censored instead of raising.  A
    prebuilt sampler can be passed for diagnostics with constructed site
    sequences; the code's own sampler is built otherwise.
    """
    if isinstance(code, str):
        code = parse_code(code)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    t0 = time.perf_counter_ns()
    if sampler is None:
        sampler = _sampler_for(model, dataset, code, seed, steps=attribution_steps,
                               sample_count=attribution_sample_count)
    baseline, _ = evaluate_detailed(model, dataset)
    consecutive = 0
    evaluations = 0
    censored = True
    for ordinal in range(budget_cap):
        site = sampler.sample_at(ordinal)
        faulty, _ = evaluate_with_fault(model, dataset, site)
        evaluations += 1
        drop = max(0.0, baseline - faulty)  # clamp: improvements are not critical
        consecutive = consecutive + 1 if drop >= threshold else 0
        if consecutive >= k:
            censored = False
            break
    wallclock = time.perf_counter_ns() - t0
    return LatencyResult(str(code), float(threshold), seed, evaluations,
                         wallclock, censored, len(dataset))


@dataclass
class FatReport:
    config: FatConfig
    baseline_accuracy: float
    post_fat_accuracy: float
    accuracy_under_trained_faults: float
    accuracy_under_adversary_faults: float
    trained_fault_sites: list
    adversary_fault_sites: list
    warmup_log: list
    fat_log: list
    latency: dict = field(default_factory=dict)  # code -> [LatencyResult]

    def to_json_dict(self):
        return {"config": self.config.to_json_dict(),
                "baseline_accuracy": self.baseline_accuracy,
                "post_fat_accuracy": self.post_fat_accuracy,
                "accuracy_under_trained_faults": self.accuracy_under_trained_faults,
                "accuracy_under_adversary_faults": self.accuracy_under_adversary_faults,
                "trained_fault_sites": [vars(s) for s in self.trained_fault_sites],
                "adversary_fault_sites": [vars(s) for s in self.adversary_fault_sites],
                "warmup_log": self.warmup_log,
                "fat_log": self.fat_log,
                "latency": {code: [r.to_json_dict() for r in results]
                            for code, results in self.latency.items()}}


def save_fat_report(report: FatReport, path):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _weight_fault_reapplier(model, sites):
    """Closure that re-XORs every weight-fault bit; run after each step so
    the faults persist through optimizer updates."""
    weight_sites = [(s.layer_id, s.element_index, np.uint32(1) << np.uint32(s.bit_index))
                    for s in sites if s.target_kind == "neuron_weight"]
    if not weight_sites:
        return None

    def reapply():
        # optimizer steps replace the weight buffers, so resolve them fresh
        for lid, idx, mask in weight_sites:
            flat = model.layers[lid].weight.data.reshape(-1)
            flat.view(np.uint32)[idx] ^= mask
    return reapply


def _clean_snapshot(model, handles):
    """Copy of the model with the given injected faults undone on the copy."""
    snapshot = model.copy()
    snapshot.registered_output_faults = []
    for h in handles:
        site = h.site
        if site.target_kind == "neuron_weight":
            flat = snapshot.layers[site.layer_id].weight.data.reshape(-1)
            flat.view(np.uint32)[site.element_index] ^= np.uint32(1) << np.uint32(site.bit_index)
    return snapshot


def fat_train(model, train_set, test_set, config: FatConfig):
    """Fault-aware training; returns (model, FatReport).

    The resilience baseline is a twin model trained clean with the exact
    same phase structure and seeds, so faults_per_round=0 reproduces it bit
    for bit.  Per-epoch latency simulations run on clean snapshots with
    distinct seeds and never touch the training model.
    """
    twin = model.copy()
    train(twin, train_set, epochs=config.warmup_epochs, batch_size=config.batch_size,
          lr=config.lr, optimizer=config.optimizer, seed=config.seed,
          eval_set=test_set)
    for epoch in range(config.fat_epochs):
        train(twin, train_set, epochs=1, batch_size=config.batch_size, lr=config.lr,
              optimizer=config.optimizer, seed=config.seed + 1 + epoch,
              eval_set=test_set)
    baseline_accuracy, _ = evaluate_detailed(twin, test_set)

    warmup_log = train(model, train_set, epochs=config.warmup_epochs,
                       batch_size=config.batch_size, lr=config.lr,
                       optimizer=config.optimizer, seed=config.seed,
                       eval_set=test_set)

    trained_sites, adversary_sites = [], []
    handles = []
    if config.faults_per_round > 0:
        own = _sampler_for(model, train_set, config.code, config.seed,
                           uniform_mix=config.uniform_mix,
                           steps=config.attribution_steps,
                           sample_count=config.attribution_sample_count)
        trained_sites = own.sample(config.faults_per_round)
        adversary = _sampler_for(model, train_set, config.adversary_code, config.seed,
                                 uniform_mix=config.uniform_mix,
                                 steps=config.attribution_steps,
                                 sample_count=config.attribution_sample_count)
        adversary_sites = adversary.sample(config.faults_per_round)
        handles = inject_set(model, trained_sites)

    reapply = _weight_fault_reapplier(model, [h.site for h in handles])
    fat_log = []
    latency: dict = {}
    try:
        for epoch in range(config.fat_epochs):
            log = train(model, train_set, epochs=1, batch_size=config.batch_size,
                        lr=config.lr, optimizer=config.optimizer,
                        seed=config.seed + 1 + epoch, eval_set=test_set,
                        on_nonfinite="skip", post_step=reapply)
            fat_log.extend(log)
            for sim in range(config.simulations_per_epoch):
                snapshot = _clean_snapshot(model, handles)
                sim_seed = config.seed + 1000 * (epoch + 1) + sim
                for code in (config.code, config.adversary_code):
                    result = measure_latency_to_critical(
                        snapshot, test_set, code, config.latency_threshold,
                        k=config.consecutive_criticals_required, seed=sim_seed,
                        attribution_steps=config.attribution_steps,
                        attribution_sample_count=config.attribution_sample_count)
                    latency.setdefault(str(code), []).append(result)
    finally:
        for h in reversed(handles):
            remove(model, h)

    post_fat_accuracy, _ = evaluate_detailed(model, test_set)
    under_trained, _ = evaluate_with_fault_set(model, test_set, trained_sites)
    under_adversary, _ = evaluate_with_fault_set(model, test_set, adversary_sites)

    report = FatReport(config=config,
                       baseline_accuracy=baseline_accuracy,
                       post_fat_accuracy=post_fat_accuracy,
                       accuracy_under_trained_faults=under_trained,
                       accuracy_under_adversary_faults=under_adversary,
                       trained_fault_sites=list(trained_sites),
                       adversary_fault_sites=list(adversary_sites),
                       warmup_log=warmup_log, fat_log=fat_log, latency=latency)
    return model, report

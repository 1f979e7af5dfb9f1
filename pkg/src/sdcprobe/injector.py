"""Bit-flip injection and fault-present evaluation.

Weight faults XOR one bit of a stored parameter in place; the flip is its
own inverse, so removal restores the model bit for bit even when the flip
lands on a NaN pattern.  Output faults register on the model and corrupt
the targeted activation element of every sample on every forward pass
until removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .fault_model import FaultSite
from .nnet import ActivationFault, evaluate_detailed
from .nnet.training import EVAL_BATCH


@dataclass
class InjectionHandle:
    site: FaultSite
    original_value: float
    active: bool = True
    _fault: ActivationFault | None = field(default=None, repr=False)


def _weight_view(model, site):
    if not 0 <= site.layer_id < len(model.layers):
        raise UsageError(f"layer id {site.layer_id} out of range")
    layer = model.layers[site.layer_id]
    weight = getattr(layer, "weight", None)
    if weight is None:
        raise UsageError(f"layer {site.layer_id} ({layer.kind}) has no weights")
    flat = weight.data.reshape(-1)
    if not 0 <= site.element_index < flat.size:
        raise UsageError(f"element {site.element_index} out of range for layer "
                         f"{site.layer_id} ({flat.size} weights)")
    return flat


def inject(model, site: FaultSite) -> InjectionHandle:
    """Activate one fault site on the model; returns the handle that undoes it."""
    if site.target_kind == "neuron_weight":
        flat = _weight_view(model, site)
        original = float(flat[site.element_index])
        # XOR on the raw pattern: exact, involutive, NaN-safe
        flat.view(np.uint32)[site.element_index] ^= np.uint32(1) << np.uint32(site.bit_index)
        return InjectionHandle(site, original)
    n_elems = int(np.prod(model.output_shapes()[site.layer_id]))
    if not 0 <= site.element_index < n_elems:
        raise UsageError(f"element {site.element_index} out of range for layer "
                         f"{site.layer_id} outputs ({n_elems} elements)")
    fault = ActivationFault(site.layer_id, site.element_index, site.bit_index)
    model.registered_output_faults.append(fault)
    return InjectionHandle(site, float("nan"), _fault=fault)


def remove(model, handle: InjectionHandle):
    """Deactivate the fault; the model is restored bit-exactly."""
    if not handle.active:
        raise UsageError("injection handle was already removed")
    if handle._fault is not None:
        model.registered_output_faults.remove(handle._fault)
    else:
        site = handle.site
        flat = _weight_view(model, site)
        flat.view(np.uint32)[site.element_index] ^= np.uint32(1) << np.uint32(site.bit_index)
    handle.active = False


def evaluate_with_fault(model, dataset, site: FaultSite,
                        batch_size: int = EVAL_BATCH) -> tuple[float, bool]:
    """(accuracy, poisoned) on the dataset with one fault active.

    The fault is always removed afterwards, even when evaluation raises.
    """
    handle = inject(model, site)
    try:
        return evaluate_detailed(model, dataset, batch_size=batch_size)
    finally:
        remove(model, handle)


def inject_set(model, sites) -> list:
    """Activate a set of faults together; duplicates are dropped first,
    since injecting the same XOR flip twice would cancel it."""
    handles = []
    try:
        for site in dict.fromkeys(sites):
            handles.append(inject(model, site))
    except BaseException:
        for h in reversed(handles):
            remove(model, h)
        raise
    return handles


def evaluate_with_fault_set(model, dataset, sites,
                            batch_size: int = EVAL_BATCH) -> tuple[float, bool]:
    """(accuracy, poisoned) with every site in the set active at once."""
    handles = inject_set(model, sites)
    try:
        return evaluate_detailed(model, dataset, batch_size=batch_size)
    finally:
        for h in reversed(handles):
            remove(model, h)

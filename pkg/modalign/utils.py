import csv
import hashlib
import json
import os
import random
from typing import Any, Callable, Dict, Iterator, List, Mapping, Sequence

import numpy as np
import torch
from chaoslib.types import Configuration

from modalign import get_logger

__all__ = [
    "breakup_iterable",
    "configure_runtime",
    "parameter_gradient_error",
    "parameter_norms",
    "seed_everything",
    "state_sha256",
    "write_csv",
    "write_json",
]

logger = get_logger()


def breakup_iterable(values: list, limit: int = 50) -> Iterator[list]:
    for i in range(0, len(values), limit):
        yield values[i : min(i + limit, len(values))]


def seed_everything(seed: int) -> torch.Generator:
    """
    Seed every RNG we touch and hand back a dedicated torch generator so
    shuffling does not depend on how many draws other code made before.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def configure_runtime(configuration: Configuration = None) -> None:
    """
    Apply the process-wide torch settings read from the configuration.

    `modalign_threads` defaults to a single intra-op thread, bitwise
    reproducibility of training runs depends on it.
    """
    configuration = configuration or {}
    threads = int(configuration.get("modalign_threads", 1))
    if threads < 1:
        threads = 1
    torch.set_num_threads(threads)

    deterministic = bool(configuration.get("modalign_deterministic", True))
    torch.use_deterministic_algorithms(deterministic, warn_only=True)
    logger.debug(
        f"torch runtime: {threads} thread(s), deterministic={deterministic}"
    )


def state_sha256(state: Mapping[str, torch.Tensor]) -> str:
    """
    SHA-256 of a state dict, stable across processes: keys are visited in
    sorted order and each tensor contributes its name, dtype, shape and
    raw bytes.
    """
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tensor.dtype).encode("utf-8"))
        digest.update(repr(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def parameter_gradient_error(
    loss_fn: Callable[[], torch.Tensor],
    parameter: torch.Tensor,
    eps: float = 1e-6,
    samples: int = 16,
    seed: int = 0,
) -> float:
    """
    Relative error between the autograd gradient of `loss_fn()` with respect
    to `parameter` and central finite differences, measured on up to
    `samples` randomly picked coordinates:

        ||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)

    Run it on float64 modules, float32 rounding swamps the differences.
    """
    loss = loss_fn()
    (analytic,) = torch.autograd.grad(loss, parameter, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(parameter)

    flat = parameter.data.view(-1)
    generator = torch.Generator().manual_seed(seed)
    picked = torch.randperm(flat.numel(), generator=generator)[:samples]

    numeric = torch.zeros(len(picked), dtype=torch.float64)
    with torch.no_grad():
        for n, i in enumerate(picked.tolist()):
            original = flat[i].item()
            flat[i] = original + eps
            up = float(loss_fn())
            flat[i] = original - eps
            down = float(loss_fn())
            flat[i] = original
            numeric[n] = (up - down) / (2.0 * eps)

    expected = analytic.detach().reshape(-1)[picked].double()
    scale = max(expected.norm().item(), numeric.norm().item(), 1e-12)
    return (expected - numeric).norm().item() / scale


def write_csv(
    path: str, header: Sequence[str], rows: List[Sequence[Any]]
) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fd:
        writer = csv.writer(fd, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path: str, payload: Dict[str, Any]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fd:
        json.dump(payload, fd, indent=2, sort_keys=True)
        fd.write("\n")


def parameter_norms(module: torch.nn.Module) -> Dict[str, float]:
    return {
        name: float(p.detach().norm())
        for name, p in module.named_parameters()
        if p.requires_grad
    }

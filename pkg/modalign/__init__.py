import logging
from importlib.metadata import PackageNotFoundError, version
from typing import List

from chaoslib.discovery.discover import (
    discover_actions,
    discover_probes,
    initialize_discovery_result,
)
from chaoslib.types import DiscoveredActivities, Discovery

__all__ = ["__version__", "discover", "get_logger"]

try:
    __version__ = version("modality-align3d")
except PackageNotFoundError:
    __version__ = "unknown"


def get_logger() -> logging.Logger:
    """
    Return the logger shared with the Chaos Toolkit runtime. Since
    chaostoolkit-lib 1.42 that logger is named `"chaostoolkit"`, and it is
    the one `chaoslib.log.configure_logger` sets handlers on.
    """
    return logging.getLogger("chaostoolkit")


logger = get_logger()


def discover(discover_system: bool = True) -> Discovery:
    """
    Discover the pipeline activities exposed by this extension: dataset
    synthesis, expert pretraining, fine-tuning, evaluation, ablation and
    the diagnostic exports.
    """
    logger.info("Discovering capabilities from modality-align3d")

    discovery = initialize_discovery_result(
        "modality-align3d", __version__, "modalign"
    )
    discovery["activities"].extend(load_exported_activities())

    return discovery


###############################################################################
# Private functions
###############################################################################
def load_exported_activities() -> List[DiscoveredActivities]:
    """
    Extract metadata from actions and probes exposed by this extension.
    """
    activities = []
    activities.extend(discover_actions("modalign.volumes.actions"))
    activities.extend(discover_probes("modalign.volumes.probes"))
    activities.extend(discover_actions("modalign.pretrain.actions"))
    activities.extend(discover_probes("modalign.pretrain.probes"))
    activities.extend(discover_actions("modalign.training.actions"))
    activities.extend(discover_probes("modalign.training.probes"))
    activities.extend(discover_actions("modalign.reporting.actions"))
    return activities

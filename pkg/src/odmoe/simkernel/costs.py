"""Parametric timing model for the simulated cluster."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError, InputError

GiB = 1024**3

DEFAULT_SHADOW_RATIO = 0.4


def transfer_time(nbytes: float, bandwidth: float, latency: float = 0.0, serialize_overhead: float = 0.0) -> float:
    """Seconds to move ``nbytes`` over a link: size/bandwidth + latency + overhead."""
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    if nbytes < 0:
        raise InputError("byte count must be non-negative")
    return nbytes / bandwidth + latency + serialize_overhead


@dataclass(frozen=True)
class CostModel:
    """Durations in seconds, sizes in bytes, bandwidths in bytes/second.

    ``t_main`` and ``t_worker`` are per-layer main-node and expert-compute
    times *including* the embedding hop between main node and workers, so
    the decode pipeline does not schedule those hops separately.
    ``shadow_layer_time`` defaults to 0.4 * (t_main + t_worker).
    """

    t_main: float = 2e-3
    t_worker: float = 3e-3
    cpu_gpu_bandwidth: float = 16 * GiB
    lan_bandwidth: float = 125e6  # 1 Gbit/s
    lan_latency: float = 2e-4
    shadow_layer_time: float | None = None
    serialize_overhead: float = 0.0
    embedding_bytes: int = 16 * 1024  # per token, prefill LAN transfers
    batch_alpha: float = 0.2

    def __post_init__(self):
        for name in ("t_main", "t_worker", "lan_latency", "serialize_overhead", "embedding_bytes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.cpu_gpu_bandwidth <= 0 or self.lan_bandwidth <= 0:
            raise ConfigError("bandwidths must be positive")
        if self.shadow_layer_time is not None and self.shadow_layer_time < 0:
            raise ConfigError("shadow_layer_time must be non-negative")
        if not 0 <= self.batch_alpha < 1:
            raise ConfigError("batch_alpha must be in [0, 1)")

    @property
    def shadow_time(self) -> float:
        if self.shadow_layer_time is None:
            return DEFAULT_SHADOW_RATIO * (self.t_main + self.t_worker)
        return self.shadow_layer_time

    def load_time(self, expert_bytes: float) -> float:
        return transfer_time(expert_bytes, self.cpu_gpu_bandwidth)

    def lan_time(self, nbytes: float) -> float:
        return transfer_time(nbytes, self.lan_bandwidth, self.lan_latency, self.serialize_overhead)

    def batched(self, per_item: float, size: int) -> float:
        """Compute time of a batch of ``size`` items: per_item * (alpha + (1 - alpha) * size)."""
        a = self.batch_alpha
        return per_item * (a + (1 - a) * size)

    def with_load_time(self, expert_bytes: float, seconds: float) -> "CostModel":
        """Copy whose CPU-GPU bandwidth makes one expert load take ``seconds``."""
        from dataclasses import replace

        if seconds <= 0:
            raise ConfigError("load time must be positive")
        return replace(self, cpu_gpu_bandwidth=expert_bytes / seconds)

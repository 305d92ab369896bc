"""Unit conversions shared by scenario sampling and the CLI presets.

GB is the binary gibibyte (2**30 bytes); Gbps is 10**9 bits per second.
"""

GIB = 2**30
GIGA = 10**9


def gb_to_bytes(gb: float) -> float:
    return gb * GIB


def bytes_to_gb(n: float) -> float:
    return n / GIB


def gbps_to_bytes_per_sec(gbps: float) -> float:
    return gbps * GIGA / 8


def gflops_to_flops(gflops: float) -> float:
    return gflops * GIGA

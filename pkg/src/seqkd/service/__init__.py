from .bundle import (
    BenchResult,
    LatencyReport,
    Recommendation,
    ServingBundle,
    bench,
    latency_report,
    recommend,
    replay,
    valid_trace,
)

__all__ = [
    "BenchResult",
    "LatencyReport",
    "Recommendation",
    "ServingBundle",
    "bench",
    "latency_report",
    "recommend",
    "replay",
    "valid_trace",
    "create_app",
]


def create_app(*args, **kwargs):
    from .app import create_app as _create

    return _create(*args, **kwargs)

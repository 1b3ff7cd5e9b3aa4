import math

BENCHMARK_VELOCITY_RANGE = 3.0


def deg_to_rad(deg: float) -> float:
    return math.radians(deg)


def velocity_to_desk(v: float, v_cap: float) -> float:
    """Map a target speed from the [-3, 3] benchmark range into [-v_cap, v_cap]."""
    return v * v_cap / BENCHMARK_VELOCITY_RANGE

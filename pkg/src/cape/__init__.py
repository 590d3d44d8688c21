"""Prior-seeded iterative guided refinement for diffusion trajectory planning."""

from cape.schedule import DiffusionSchedule, Trajectory, forward_noise, make_schedule, reverse_mean

__version__ = "0.1.0"

__all__ = [
    "DiffusionSchedule",
    "Trajectory",
    "forward_noise",
    "make_schedule",
    "reverse_mean",
]

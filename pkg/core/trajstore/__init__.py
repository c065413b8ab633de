#!/usr/bin/env python3
"""
DistillForge Trajectory Store
"""

from .buffer import read_buffer, write_buffer
from .pool import ExpertPool
from .schedule import MatchingRangeSchedule, sample_start, stage_schedules
from .trajectory import Trajectory, TrajectoryMeta, distance_profile, get_pair, train_expert

__all__ = [
    'Trajectory', 'TrajectoryMeta', 'MatchingRangeSchedule', 'ExpertPool',
    'train_expert', 'get_pair', 'distance_profile', 'sample_start', 'stage_schedules',
    'read_buffer', 'write_buffer',
]

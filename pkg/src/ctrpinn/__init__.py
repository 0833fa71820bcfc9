"""Concentric tube robot kinematics: Cosserat-rod shooting solver and a
physics-informed network trained on the rod equations."""
from .robot import (
                    RESTRICTED,
                    SNAP_FREE,
                    Actuation,
                    ActuationDomain,
                    ConfigError,
                    DomainError,
                    RobotSpec,
                    TubeSpec,
                    load_robot,
                    section_properties,
)
from .rod import SegmentLayout, ode_rhs, segment_layout

__all__ = [
    "Actuation", "ActuationDomain", "ConfigError", "DomainError", "RESTRICTED",
    "RobotSpec", "SNAP_FREE", "SegmentLayout", "TubeSpec", "load_robot", "ode_rhs",
    "section_properties", "segment_layout",
]

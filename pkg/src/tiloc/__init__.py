"""Temporal interaction localization for egocentric RGB-D grasp clips.

Estimates the contact and separation timestamps of a hand-object grasp by
combining 3D hand-speed analysis with grid-image queries to a vision-language
model backend.
"""

__version__ = "0.1.0"

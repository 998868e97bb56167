"""Cosserat-rod cochlear-implant insertion simulation and planning."""

__version__ = "0.1.0"

SCHEMA_VERSIONS = {
    "lumen_json": 1,
    "stations_json": 1,
    "trajectory_csv": 1,
    "pairs_csv": 1,
    "plan_json": 1,
}

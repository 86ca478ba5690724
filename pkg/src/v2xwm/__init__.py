"""World-model link scheduling for mmWave V2X networks."""

__version__ = "0.1.0"

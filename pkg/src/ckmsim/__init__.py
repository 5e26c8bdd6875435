"""ISAC-based channel knowledge map simulator.

Subpackages cover the full pipeline: OFDM sensing/ISAC frame generation
(`waveform`), 2-D geometric multipath echo synthesis (`channel`), radar
parameter estimation (`dsp`), beam-index / channel-gain maps (`ckm`),
experiment orchestration (`scenario`), and a batch CLI (`cli`).
"""

from . import channel, ckm, cli, dsp, scenario, waveform

__all__ = ["waveform", "channel", "dsp", "ckm", "scenario", "cli"]
__version__ = "0.1.0"

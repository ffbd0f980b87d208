"""Seed splitting.

All randomness derives from one integer seed. Each subsystem gets its own
PCG64 stream keyed by ``SeedSequence(seed, spawn_key=(index,))`` where
``index`` is the position of the subsystem name in :data:`STREAMS`. Any
stream can therefore be reseeded without disturbing the others, and
the streams are reproducible across platforms (PCG64 and SeedSequence are
fully specified by numpy).
"""
import numpy as np

STREAMS = ("init", "batching", "dropout", "synth", "eval")


def stream(seed: int, name: str) -> np.random.Generator:
    if name not in STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}; expected one of {STREAMS}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS.index(name),))
    return np.random.Generator(np.random.PCG64(ss))


def get_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)

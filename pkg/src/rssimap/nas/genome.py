"""Search points: one operation choice per searchable node of the skeleton."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ConfigError

CONV_OPS = ("conv3", "conv5", "conv7")
ALL_OPS = CONV_OPS + ("avgpool4", "maxpool4")


@dataclass(frozen=True)
class Skeleton:
    """UNet-style macro topology with ``depth`` encoder and decoder stages.

    Slots, in gene order: enc0..enc{d-1}, down0..down{d-1}, mid,
    up{d-1}..up0, dec{d-1}..dec0.  Only the stage-boundary slots (down/up)
    may hold pooling operations.
    """

    widths: tuple = (32, 64, 128, 256)

    def __post_init__(self):
        if len(self.widths) < 1 or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"invalid stage widths {self.widths}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def depth(self):
        return len(self.widths)

    @property
    def slots(self):
        d = self.depth
        return ([f"enc{i}" for i in range(d)] + [f"down{i}" for i in range(d)] + ["mid"]
                + [f"up{i}" for i in reversed(range(d))] + [f"dec{i}" for i in reversed(range(d))])

    def legal_ops(self, slot):
        return ALL_OPS if slot.startswith(("down", "up")) else CONV_OPS

    @property
    def n_nodes(self):
        return len(self.slots)

    @property
    def downsample(self):
        return 2 ** self.depth


DEFAULT_SKELETON = Skeleton()


@dataclass
class ArchGenome:
    genes: tuple
    age: int = 0
    fitness: Optional[float] = None
    birth: int = field(default=0, compare=False)

    def __post_init__(self):
        self.genes = tuple(self.genes)

    def validate(self, skeleton: Skeleton = DEFAULT_SKELETON):
        if len(self.genes) != skeleton.n_nodes:
            raise ConfigError(f"genome has {len(self.genes)} genes, skeleton has {skeleton.n_nodes} nodes")
        for slot, op in zip(skeleton.slots, self.genes):
            if op not in skeleton.legal_ops(slot):
                raise ConfigError(f"operation {op!r} is not allowed at slot {slot}")
        return self

    @property
    def key(self):
        return ",".join(self.genes)

    def digest(self):
        return hashlib.sha256(self.key.encode()).hexdigest()

    def to_json(self):
        return {"genes": list(self.genes), "age": self.age, "fitness": self.fitness}

    @classmethod
    def from_json(cls, d):
        if isinstance(d, list):
            return cls(tuple(d))
        return cls(tuple(d["genes"]), int(d.get("age", 0)), d.get("fitness"))


def random_genome(skeleton: Skeleton, rng) -> ArchGenome:
    genes = tuple(str(rng.choice(skeleton.legal_ops(s))) for s in skeleton.slots)
    return ArchGenome(genes)


def mutate(parent: ArchGenome, rng, skeleton: Skeleton = DEFAULT_SKELETON) -> ArchGenome:
    """Resample one uniformly chosen gene to a different legal operation."""
    parent.validate(skeleton)
    k = int(rng.integers(skeleton.n_nodes))
    choices = [op for op in skeleton.legal_ops(skeleton.slots[k]) if op != parent.genes[k]]
    genes = list(parent.genes)
    genes[k] = str(choices[int(rng.integers(len(choices)))])
    return ArchGenome(tuple(genes))


def hamming(a: ArchGenome, b: ArchGenome):
    return sum(x != y for x, y in zip(a.genes, b.genes))


def uniform_genome(skeleton: Skeleton, op="conv3"):
    """Genome using ``op`` at every slot where it is legal (conv3 otherwise)."""
    return ArchGenome(tuple(op if op in skeleton.legal_ops(s) else "conv3" for s in skeleton.slots))


def candidate_seed(seed, genome: ArchGenome):
    """Training seed for a candidate, derived from the search seed and the genes."""
    h = int(genome.digest()[:16], 16)
    return int(np.random.SeedSequence([int(seed), h]).generate_state(1)[0])

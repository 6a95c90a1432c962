"""Population-based search: Individual, Population and the hill-climbing pipeline.

A search step is ``populate -> perturb -> assess -> reduce``; every stage
returns new objects and leaves its input alone.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from lamina.errors import ConfigError, MissingAssessmentError, ShapeError
from lamina.kaku import Assessment, best_index


class Individual:
    """Named arrays plus an optional assessment.

    Field mutation through :meth:`set` bumps ``generation``; an assessment is
    only valid for the generation it was made at.
    """

    def __init__(self, fields=None, **kwargs):
        merged = dict(fields or {})
        merged.update(kwargs)
        self._fields = {name: np.array(v, dtype=np.float64) for name, v in merged.items()}
        self.generation = 0
        self._assessment = None
        self._assessed_at = -1

    @property
    def fields(self):
        return dict(self._fields)

    def names(self):
        return list(self._fields)

    def __getitem__(self, name):
        return self._fields[name]

    def set(self, name, value):
        self._fields[name] = np.array(value, dtype=np.float64)
        self.generation += 1

    @property
    def assessment(self):
        if self._assessment is None or self._assessed_at != self.generation:
            return None
        return self._assessment

    def report(self, assessment):
        self._assessment = assessment
        self._assessed_at = self.generation
        return self

    def copy(self, keep_assessment=False):
        other = Individual({k: v.copy() for k, v in self._fields.items()})
        if keep_assessment and self.assessment is not None:
            other.report(self.assessment)
        return other

    def populate(self, k):
        return populate(self, k)

    def __repr__(self):
        shapes = {k: v.shape for k, v in self._fields.items()}
        return f"Individual({shapes}, assessment={self.assessment})"


class Population:
    """A non-empty list of individuals sharing one field schema."""

    def __init__(self, members):
        members = list(members)
        if not members:
            raise ConfigError("a population needs at least one member")
        schema = {k: v.shape for k, v in members[0].fields.items()}
        for i, m in enumerate(members[1:], start=1):
            other = {k: v.shape for k, v in m.fields.items()}
            if other != schema:
                raise ShapeError(f"member {i} has schema {other}, expected {schema}")
        self.members = members

    @property
    def k(self):
        return len(self.members)

    def __len__(self):
        return len(self.members)

    def __getitem__(self, i):
        return self.members[i]

    def __iter__(self):
        return iter(self.members)

    def stack(self, name):
        """Field ``name`` of every member stacked along a new leading axis."""
        return np.stack([m[name] for m in self.members])

    def assessments(self):
        return [m.assessment for m in self.members]


def populate(ind, k):
    if k < 1:
        raise ConfigError(f"population size must be at least 1, got {k}")
    return Population([ind.copy() for _ in range(k)])


def perturb_gaussian(pop, std, rng, preserve_first=False):
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    out = []
    for i, member in enumerate(pop):
        fresh = member.copy()
        if not (preserve_first and i == 0):
            for name, value in member.fields.items():
                fresh.set(name, value + rng.normal(0.0, std, size=value.shape))
        out.append(fresh)
    return Population(out)


class AssessmentFailure(RuntimeError):
    def __init__(self, index, cause):
        self.index = index
        super().__init__(f"objective failed on member {index}: {cause!r}")


def assess_population(pop, objective: Callable[[Individual], Assessment]):
    out = []
    for i, member in enumerate(pop):
        try:
            assessment = objective(member)
        except Exception as exc:
            raise AssessmentFailure(i, exc) from exc
        out.append(member.copy().report(assessment))
    return Population(out)


def reduce_best(pop):
    assessments = pop.assessments()
    for i, a in enumerate(assessments):
        if a is None:
            raise MissingAssessmentError(f"member {i} has no current assessment")
    return pop[best_index(assessments)].copy(keep_assessment=True)


def climb_hill(ind, k, std, objective, rng, preserve_first=True):
    """One hill-climbing step: populate, perturb, assess, keep the best."""
    population = populate(ind, k)
    population = perturb_gaussian(population, std, rng, preserve_first=preserve_first)
    population = assess_population(population, objective)
    return reduce_best(population)

"""Synthetic vehicle mobility: random waypoint over the hexagonal deployment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .geometry import HexGrid


@dataclass
class Vehicle:
    id: int
    position: np.ndarray  # m
    velocity: np.ndarray  # m/s
    serving_cell: int
    outstanding_job: Optional[int] = None
    waypoint: Optional[np.ndarray] = None

    @property
    def speed(self) -> float:
        return float(np.hypot(*self.velocity))


@dataclass(frozen=True)
class Handover:
    vehicle: int
    old: int
    new: int


def _new_leg(v: Vehicle, grid: HexGrid, rng: np.random.Generator, speed_range) -> None:
    lo, hi = grid.bounds()
    v.waypoint = rng.uniform(lo, hi)
    heading = v.waypoint - v.position
    dist = float(np.hypot(*heading))
    speed = rng.uniform(*speed_range)
    v.velocity = heading / dist * speed if dist > 0 else np.zeros(2)


def place_fleet(n: int, grid: HexGrid, rng: np.random.Generator,
                speed_range=(5.0, 15.0)) -> list[Vehicle]:
    lo, hi = grid.bounds()
    fleet = []
    for k in range(n):
        pos = rng.uniform(lo, hi)
        v = Vehicle(k, pos, np.zeros(2), grid.nearest(pos))
        _new_leg(v, grid, rng, speed_range)
        fleet.append(v)
    return fleet


def mobility_step(vehicles: Sequence[Vehicle], grid: HexGrid, tau: float, rng: np.random.Generator,
                  speed_range=(5.0, 15.0)) -> list[Handover]:
    """Advance every vehicle by one slot and re-associate it with the nearest cell.

    A vehicle that reaches its waypoint within the slot stops there and draws
    the next leg, which starts in the following slot.
    """
    moving = [v for v in vehicles if v.waypoint is not None]
    for v in moving:
        step = v.velocity * tau
        remaining = v.waypoint - v.position
        if np.dot(step, step) >= np.dot(remaining, remaining):
            v.position = v.waypoint.copy()
            _new_leg(v, grid, rng, speed_range)
        else:
            v.position = v.position + step
    events = []
    if not moving:
        return events
    cells = grid.nearest_many(np.array([v.position for v in moving]))
    for v, cell in zip(moving, cells):
        if cell != v.serving_cell:
            events.append(Handover(v.id, v.serving_cell, int(cell)))
            v.serving_cell = int(cell)
    return events


def handover_probs(position: np.ndarray, velocity: np.ndarray, grid: HexGrid, cell: int,
                   kappa: float = 4.0) -> np.ndarray:
    """Probability of the next cell among the neighbours of ``cell``, from the heading.

    Weights are exp(kappa * cos) of the angle between the velocity and the
    direction to each neighbour's center; a stopped vehicle gets a uniform vector.
    """
    nbrs = grid.neighbors(cell)
    if not nbrs:
        return np.zeros(0)
    vx, vy = float(velocity[0]), float(velocity[1])
    speed = math.hypot(vx, vy)
    if speed == 0.0:
        return np.full(len(nbrs), 1.0 / len(nbrs))
    px, py = float(position[0]), float(position[1])
    centers = grid.center_xy
    logits = []
    for n in nbrs:
        dx, dy = centers[n][0] - px, centers[n][1] - py
        norm = math.hypot(dx, dy) or 1.0
        logits.append(kappa * (dx * vx + dy * vy) / (norm * speed))
    top = max(logits)
    weights = np.exp(np.array(logits) - top)
    return weights / weights.sum()

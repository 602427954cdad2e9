"""Request and response documents shared by the service, HTTP API and CLI."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .bench import ExperimentConfig


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ErrorBody(_Doc):
    type: str
    message: str


class ErrorResponse(_Doc):
    error: ErrorBody


class GenWorldRequest(_Doc):
    kind: Literal["default", "random"] = "default"
    seed: int = 0
    n: int = Field(8, ge=1)
    n_states: int = Field(12, ge=1, le=64)
    n_actions: int = Field(4, ge=1, le=8)
    out: str


class GenWorldResponse(_Doc):
    path: str
    n_states: int
    n_actions: int
    n: int
    start_states: list[int]


class GenDataRequest(_Doc):
    world: str
    kind: Literal["transitions", "rewards"] = "transitions"
    count: int = Field(1000, ge=1)
    seed: int = 0
    episode_len: int = Field(5, ge=1)
    out: str


class GenDataResponse(_Doc):
    path: str
    count: int
    dims: int


class TrainTransitionRequest(_Doc):
    data: str
    backend: Literal["ensemble", "mdn"] = "ensemble"
    epochs: int = Field(100, ge=1)
    lr: float = Field(0.05, gt=0)
    mdn_lr: float = Field(0.01, gt=0)
    batch_size: int = Field(64, ge=1)
    hidden: int = Field(64, ge=1)
    depth: int = Field(2, ge=1)
    members: int = Field(4, ge=1)
    jitter_sigma: float = Field(0.05, ge=0)
    k_mix: int = Field(16, ge=1)
    valid_fraction: float = Field(0.1, ge=0, lt=1)
    aux_reward: bool = False
    reward: str | None = None
    seed: int = 0
    out: str

    @model_validator(mode="after")
    def _aux_needs_reward(self):
        if self.aux_reward and not self.reward:
            raise ValueError("aux_reward needs a linear reward checkpoint in 'reward'")
        return self


class TrainTransitionResponse(_Doc):
    action: str
    next_state: str
    val_loss_action: float
    val_loss_next_state: float


class TrainRewardRequest(_Doc):
    data: str
    linear: bool = True
    epochs: int = Field(100, ge=1)
    lr: float = Field(0.05, gt=0)
    batch_size: int = Field(64, ge=1)
    hidden: int = Field(64, ge=1)
    valid_fraction: float = Field(0.1, ge=0, lt=1)
    seed: int = 0
    out: str


class TrainRewardResponse(_Doc):
    path: str
    kind: str
    val_loss: float


class ModelPaths(_Doc):
    action: str
    next_state: str
    reward: str


class PlanSettings(_Doc):
    gamma: float = Field(0.9, gt=0, le=1)
    m: int = Field(5, ge=1)
    depth: int = Field(3, ge=1)
    lam: float = Field(0.1, ge=0)
    budget_iters: int | None = Field(None, gt=0)
    budget_ms: float | None = Field(None, gt=0)
    reward_scale: float = 1.0
    chance: Literal["single", "widening"] = "single"
    seed: int = 0
    workers: int = Field(1, ge=1)
    latency_ms: float = Field(0.0, ge=0)
    greedy1_samples: int = Field(5, ge=1)

    @model_validator(mode="after")
    def _budget(self):
        if self.budget_iters is None and self.budget_ms is None:
            self.budget_iters = 1000
        return self


class PlanRequest(_Doc):
    """Either a world state (``world`` + ``state``; candidates are action ids,
    all actions by default) or a raw context vector with candidate vectors."""

    method: Literal["scope", "vanilla", "random", "greedy0", "greedy1"] = "scope"
    world: str | None = None
    state: int | None = None
    context: list[float] | None = None
    candidates: list[int] | list[list[float]] | None = None
    models: ModelPaths | None = None
    config: PlanSettings = Field(default_factory=PlanSettings)

    @model_validator(mode="after")
    def _shape(self):
        by_state = self.world is not None and self.state is not None
        by_vector = self.context is not None
        if by_state == by_vector:
            raise ValueError("give either world+state or a raw context vector")
        if by_vector:
            if self.method != "scope":
                raise ValueError(f"method {self.method!r} needs a world state")
            if not self.candidates or not isinstance(self.candidates[0], list):
                raise ValueError("a raw context needs candidate vectors")
        if self.method == "scope" and self.models is None:
            raise ValueError("method 'scope' needs model checkpoints")
        if self.candidates is not None and len(self.candidates) == 0:
            raise ValueError("need at least one candidate")
        return self


class PlanResponse(_Doc):
    method: str
    index: int
    candidate: int | list[float]
    q: list[float]
    visits: list[int]
    stats: dict


class BenchRequest(_Doc):
    config: ExperimentConfig
    out: str


class BenchResponse(_Doc):
    rows: str
    summary: str
    groups: list[dict]


class DiagRequest(_Doc):
    action: str
    next_state: str
    data: str
    mode: Literal["mean", "sample"] = "mean"
    limit: int | None = Field(None, ge=1)
    seed: int = 0
    out: str | None = None


class DiagResponse(_Doc):
    action: dict
    next_state: dict
    path: str | None = None

from enum import Flag, IntEnum, auto
from typing import Annotated, Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing_extensions import TypedDict

Probability = Annotated[float, Field(ge=0.0, le=1.0)]
ErrorRate = Annotated[float, Field(ge=0.0, le=0.5)]
OpenProbability = Annotated[float, Field(gt=0.0, lt=1.0)]


class Basis(IntEnum):
    """Measurement basis; the values double as wire announcement codes."""

    X = 1  # diagonal
    Z = 2  # rectilinear


# Announcement code for a detector that did not fire, and for a double click
NO_DETECTION = 0
DOUBLE_CLICK = 3


class RoundFlag(Flag):
    NONE = 0
    LOST = auto()
    ACCIDENTAL = auto()
    DOUBLE_CLICK = auto()


class SourceModel(BaseModel):
    """Entangled-pair source seen by both stations.

    The source is basis independent: the phase-error probability in one basis
    is the bit-error probability of the other, so ``p_pz == p_bx`` and
    ``p_px == p_bz`` hold by construction.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    p_bx: Probability = Field(description="Intrinsic X-basis bit-error probability")
    p_bz: Probability = Field(description="Intrinsic Z-basis bit-error probability")
    pair_rate: float = Field(default=1.0e5, gt=0.0, description="Pairs per second, timeline labelling only")
    accidental_prob: Probability = Field(default=0.0, description="Probability a round is an uncorrelated accidental")
    double_click_prob: Probability = Field(default=0.0, description="Per-station double-click probability")

    @property
    def p_pz(self) -> float:
        return self.p_bx

    @property
    def p_px(self) -> float:
        return self.p_bz

    def bit_error(self, basis: Basis) -> float:
        return self.p_bz if basis == Basis.Z else self.p_bx


class StationModel(BaseModel):
    """One party's passive basis choice and detection efficiency."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    q: Probability = Field(description="Probability of measuring in the Z basis")
    pre_attenuation: float = Field(default=1.0, gt=0.0, le=1.0, description="Overall detection-efficiency factor")


class BiasConfig(BaseModel):
    """Z-basis probabilities of Alice and Bob."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    q_A: Probability
    q_B: Probability

    @classmethod
    def symmetric(cls, q: float) -> "BiasConfig":
        return cls(q_A=q, q_B=q)

    @property
    def w_xx(self) -> float:
        """Probability that both parties measure in X."""
        return (1.0 - self.q_A) * (1.0 - self.q_B)

    @property
    def w_zz(self) -> float:
        """Probability that both parties measure in Z."""
        return self.q_A * self.q_B


class KeyRateParams(BaseModel):
    """Inputs of the finite-key rate formula."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    q_A: Probability
    q_B: Probability
    e_bx: ErrorRate
    e_bz: ErrorRate
    f_x: float = Field(default=1.0, ge=1.0)
    f_z: float = Field(default=1.0, ge=1.0)
    eps_x: float = Field(default=0.0, ge=0.0)
    eps_z: float = Field(default=0.0, ge=0.0)


class EpsilonBudget(BaseModel):
    """Failure probabilities of the two phase-error estimates."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    P_eps_x: OpenProbability
    P_eps_z: OpenProbability

    @property
    def P_eps(self) -> float:
        return self.P_eps_x + self.P_eps_z

    @classmethod
    def even(cls, total: float) -> "EpsilonBudget":
        return cls(P_eps_x=total / 2.0, P_eps_z=total / 2.0)

    @classmethod
    def split(cls, total: float, fraction_x: float) -> "EpsilonBudget":
        return cls(P_eps_x=total * fraction_x, P_eps_z=total * (1.0 - fraction_x))


class KeyRateResult(BaseModel):
    """Optimum of the finite-key rate over the bias (and the P_eps split)."""

    model_config = ConfigDict(frozen=True)

    R: float = Field(description="Secure bits per raw bit, floored at zero")
    R_raw: float = Field(description="Unfloored optimum, negative when no positive rate exists")
    q_A_star: float
    q_B_star: float
    eps_x_star: float
    eps_z_star: float
    budget: EpsilonBudget
    positive: bool

    @property
    def q_star(self) -> float:
        return self.q_A_star


class CascadeConfig(BaseModel):
    """Parameters of the cascade reconciliation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_passes: int = Field(default=3, ge=1)
    block_constant: float = Field(default=0.86, gt=0.0, description="c in k1 = round(c / e)")
    s: int = Field(default=40, ge=1, description="BICONF rounds; residual error probability < 2^-s")
    frame_length: int = Field(default=1000, ge=2, description="Sifted bits reconciled per frame")
    qber_prior_x: ErrorRate = Field(default=0.05, description="Working QBER for the first X frame")
    qber_prior_z: ErrorRate = Field(default=0.01, description="Working QBER for the first Z frame")
    seed: int = Field(default=0, ge=0, description="Shuffle seed stream for stand-alone runs")

    def prior(self, basis: Basis) -> float:
        return self.qber_prior_z if basis == Basis.Z else self.qber_prior_x


class SessionReport(BaseModel):
    """Outcome of one session, identical on both parties."""

    model_config = ConfigDict(ser_json_inf_nan="constants")

    session_id: str
    status: Literal["ok", "no_positive_rate", "verification_failed"] = "ok"
    n_rounds: int
    raw_len: int
    sifted_len: int
    final_len: int
    n_xx: int
    n_zz: int
    dropped: int
    mismatched: int
    errors_x: int
    errors_z: int
    qber_x: Optional[float]
    qber_z: Optional[float]
    secure_per_raw: float
    eps_x: float
    eps_z: float
    p_eps_x: float
    p_eps_z: float
    leak_x: int
    leak_z: int
    f_x: Optional[float]
    f_z: Optional[float]
    final_rate: Optional[float] = Field(default=None, description="Average final-key bits per second at the source pair rate")
    efficiency_ratio_vs_baseline: Optional[float] = None

    @model_validator(mode="after")
    def _conservation(self) -> "SessionReport":
        if self.sifted_len != self.n_xx + self.n_zz:
            raise ValueError("sifted_len must equal n_xx + n_zz")
        if self.raw_len != self.sifted_len + self.dropped + self.mismatched:
            raise ValueError("raw_len must equal matched + mismatched + dropped")
        return self


class PartyState(TypedDict, total=False):
    # Input
    role: Literal["alice", "bob"]
    # Distribution and sifting
    sifted: Any
    # Reconciliation, one entry per basis
    corrected: dict
    stats: dict
    leaks: dict
    errors: dict
    flips: dict
    transcripts: dict
    # Verification and estimation
    verified: bool
    budget: EpsilonBudget
    eps: dict
    final_len: int
    # Output
    final_key: Any
    report: SessionReport

"""Domain types, built-in data packs and experiment plans."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Literal, TypeAlias

Condition: TypeAlias = Literal["verbal", "numeric", "stripped"]
Scaffold: TypeAlias = Literal["A", "B"]
Role: TypeAlias = Literal["buyer", "seller"]
Confidence: TypeAlias = Literal["low", "medium", "high"]
InferenceVariant: TypeAlias = Literal["full", "dollar_redacted", "persona_redacted"]
Design: TypeAlias = Literal["main", "factorial", "stripped"]

TARGET_LEVELS = (5000, 10000, 15000, 20000, 30000, 50000)
CONDITIONS: tuple[Condition, ...] = ("verbal", "numeric", "stripped")
SCAFFOLDS: tuple[Scaffold, ...] = ("A", "B")
VARIANTS = (1, 2, 3)
INFERENCE_VARIANTS: tuple[InferenceVariant, ...] = ("full", "dollar_redacted", "persona_redacted")
CONFIDENCE_LEVELS: tuple[Confidence, ...] = ("low", "medium", "high")

# Symbol form with optional thousands separators / decimals / k suffix, or "N dollars".
CURRENCY_RE = re.compile(
    r"\$\s?\d{1,3}(?:,\d{3})+(?:\.\d+)?(?:[kK]\b)?"
    r"|\$\s?\d+(?:\.\d+)?(?:[kK]\b)?"
    r"|\b\d{1,3}(?:,\d{3})+(?:\.\d+)?\s*dollars?\b"
    r"|\b\d+(?:\.\d+)?\s*dollars?\b",
    re.IGNORECASE,
)


class PackError(ValueError):
    """A data pack or domain value violates its invariants."""


class PlanError(ValueError):
    pass


def format_cents(cents: int) -> str:
    """Render integer cents as ``$49.99``, or ``$200`` for whole dollars."""
    dollars, rem = divmod(cents, 100)
    return f"${dollars:,}" if rem == 0 else f"${dollars:,}.{rem:02d}"


# --------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class Product:
    code: str
    name: str
    description: str
    price: int  # cents
    rating: Decimal
    tier: str

    def __post_init__(self) -> None:
        if not re.fullmatch(r"[A-E]", self.code):
            raise PackError(f"product code must be a single letter A-E, got {self.code!r}")
        if self.price <= 0:
            raise PackError(f"product {self.code} has non-positive price")
        rating = Decimal(str(self.rating))
        if not (Decimal(0) <= rating <= Decimal(5)) or rating.as_tuple().exponent != -1:
            raise PackError(f"product {self.code} rating must be 0-5 with one decimal, got {self.rating}")
        object.__setattr__(self, "rating", rating)

    def to_dict(self) -> dict[str, Any]:
        return {
            "code": self.code,
            "name": self.name,
            "description": self.description,
            "price": self.price,
            "rating": str(self.rating),
            "tier": self.tier,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Product:
        return cls(
            code=d["code"],
            name=d["name"],
            description=d["description"],
            price=int(d["price"]),
            rating=Decimal(str(d["rating"])),
            tier=d["tier"],
        )


@dataclass(frozen=True)
class ConsumerProfile:
    id: str
    description: str
    target_wtp: int  # cents, scoring only
    pack: Literal["standard", "stripped"] = "standard"
    variant: int = 1

    def __post_init__(self) -> None:
        if self.target_wtp not in TARGET_LEVELS:
            raise PackError(f"{self.id}: target {self.target_wtp} not one of {TARGET_LEVELS}")
        if self.variant not in VARIANTS:
            raise PackError(f"{self.id}: variant must be 1-3")
        if self.pack not in ("standard", "stripped"):
            raise PackError(f"{self.id}: unknown pack {self.pack!r}")
        if CURRENCY_RE.search(self.description):
            raise PackError(f"{self.id}: description contains a currency amount")
        if self.pack == "stripped":
            hits = financial_register_hits(self.description)
            if hits:
                raise PackError(f"{self.id}: stripped profile uses financial vocabulary {hits}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "variant": self.variant,
            "target_wtp": self.target_wtp,
            "description": self.description,
        }


@dataclass(frozen=True)
class Instruction:
    form: Literal["verbal", "numeric"]
    scaffold: Scaffold = "A"
    profile: ConsumerProfile | None = None
    budget: int | None = None  # cents
    privacy_directive: str | None = None

    def __post_init__(self) -> None:
        if self.scaffold not in SCAFFOLDS:
            raise PackError(f"unknown scaffold {self.scaffold!r}")
        if self.form == "verbal":
            if self.profile is None or self.budget is not None or self.privacy_directive is not None:
                raise PackError("verbal instruction needs a profile and no budget")
        elif self.form == "numeric":
            if self.budget is None or self.profile is not None:
                raise PackError("numeric instruction needs a budget and no profile")
            if self.privacy_directive != numeric_pack().privacy_directive:
                raise PackError("numeric instruction must carry the fixed privacy directive")
        else:
            raise PackError(f"unknown instruction form {self.form!r}")

    @classmethod
    def verbal(cls, profile: ConsumerProfile, scaffold: Scaffold = "A") -> Instruction:
        return cls(form="verbal", profile=profile, scaffold=scaffold)

    @classmethod
    def numeric(cls, budget: int, scaffold: Scaffold = "A") -> Instruction:
        return cls(
            form="numeric",
            budget=budget,
            scaffold=scaffold,
            privacy_directive=numeric_pack().privacy_directive,
        )


@dataclass(frozen=True)
class Turn:
    role: Role
    text: str


@dataclass(frozen=True)
class Transcript:
    """Ordered buyer/seller turns.

    ``turn_limit_hit`` and ``truncated_turns`` are run metadata kept in the
    manifest, not in the transcript file, so they do not take part in equality.
    """

    turns: tuple[Turn, ...]
    turn_limit_hit: bool = field(default=False, compare=False)
    truncated_turns: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        for i, turn in enumerate(self.turns):
            expected = "buyer" if i % 2 == 0 else "seller"
            if turn.role != expected:
                raise ValueError(f"turn {i} has role {turn.role!r}, expected {expected!r}")

    @property
    def buyer_turns(self) -> list[str]:
        return [t.text for t in self.turns if t.role == "buyer"]

    def to_text(self) -> str:
        """Bracket-marker format: ``[BUYER] ...`` paragraphs separated by blank lines."""
        return "\n\n".join(f"[{t.role.upper()}] {t.text}" for t in self.turns) + ("\n" if self.turns else "")

    @classmethod
    def from_text(cls, text: str) -> Transcript:
        parts = _MARKER_RE.split(text)
        if parts[0].strip():
            raise ValueError("transcript text must start with a [BUYER] or [SELLER] marker")
        turns = []
        for role, body in zip(parts[1::2], parts[2::2]):
            turns.append(Turn(role=role.lower(), text=body.rstrip("\n")))  # type: ignore[arg-type]
        return cls(tuple(turns))

    def with_texts(self, texts: list[str]) -> Transcript:
        if len(texts) != len(self.turns):
            raise ValueError("turn count changed")
        return Transcript(
            tuple(Turn(t.role, s) for t, s in zip(self.turns, texts)),
            turn_limit_hit=self.turn_limit_hit,
            truncated_turns=self.truncated_turns,
        )


_MARKER_RE = re.compile(r"^\[(BUYER|SELLER)\] ?", re.MULTILINE)


@dataclass(frozen=True)
class TrialLabel:
    trial_id: str
    condition: Condition
    cell_id: str
    target_wtp: int
    profile_id: str | None
    variant: int
    scaffold: Scaffold
    trial_number: int
    seed: int
    status: Literal["complete", "lost"] = "complete"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrialLabel:
        return cls(**d)


@dataclass(frozen=True)
class InferenceReport:
    estimate: int  # whole dollars
    confidence: Confidence
    key_signals: tuple[str, str, str]
    variant: InferenceVariant
    raw: str
    flags: tuple[str, ...] = ()
    retries: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.estimate, bool) or not isinstance(self.estimate, int) or self.estimate <= 0:
            raise ValueError(f"estimate must be a positive integer, got {self.estimate!r}")
        if len(self.key_signals) != 3:
            raise ValueError("key_signals must hold exactly three items")
        if self.confidence not in CONFIDENCE_LEVELS:
            raise ValueError(f"bad confidence {self.confidence!r}")
        if self.variant not in INFERENCE_VARIANTS:
            raise ValueError(f"bad inference variant {self.variant!r}")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["key_signals"] = list(self.key_signals)
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> InferenceReport:
        return cls(
            estimate=d["estimate"],
            confidence=d["confidence"],
            key_signals=tuple(d["key_signals"]),  # type: ignore[arg-type]
            variant=d["variant"],
            raw=d["raw"],
            flags=tuple(d.get("flags", ())),
            retries=d.get("retries", 0),
        )


@dataclass(frozen=True)
class PlannedTrial:
    condition: Condition
    cell_id: str
    variant: int
    scaffold: Scaffold
    trial_number: int
    seed: int

    @property
    def key(self) -> tuple[str, str, int, str, int]:
        return (self.condition, self.cell_id, self.variant, self.scaffold, self.trial_number)

    @property
    def trial_id(self) -> str:
        return f"{self.condition}-{self.cell_id}-v{self.variant}{self.scaffold}-t{self.trial_number:03d}"


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    trials: tuple[PlannedTrial, ...]
    master_seed: int

    def __post_init__(self) -> None:
        keys = [t.key for t in self.trials]
        if len(set(keys)) != len(keys):
            raise PlanError("plan contains duplicate trial tuples")

    def to_json(self) -> str:
        payload = {
            "name": self.name,
            "master_seed": self.master_seed,
            "trials": [asdict(t) for t in self.trials],
        }
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ExperimentPlan:
        d = json.loads(text)
        return cls(
            name=d["name"],
            master_seed=d["master_seed"],
            trials=tuple(PlannedTrial(**t) for t in d["trials"]),
        )

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# --------------------------------------------------------------------------
# Data packs


@dataclass(frozen=True)
class NumericPack:
    version: str
    budget_sentence: str
    privacy_directive: str
    cells: dict[str, int]


@dataclass(frozen=True)
class ProfilePack:
    name: str
    version: str
    synthetic: bool
    profiles: tuple[ConsumerProfile, ...]

    def by_id(self) -> dict[str, ConsumerProfile]:
        return {p.id: p for p in self.profiles}

    def to_dict(self) -> dict[str, Any]:
        return {
            "pack": self.name,
            "version": self.version,
            "synthetic": self.synthetic,
            "profiles": [p.to_dict() for p in self.profiles],
        }


def _data_text(name: str) -> str:
    return resources.files("prefleak.data").joinpath(name).read_text(encoding="utf-8")


def data_lines(name: str) -> list[str]:
    """Entries of a one-per-line data file, skipping comments and blanks."""
    return [
        line.strip()
        for line in _data_text(name).splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]


def _profile_pack_from_dict(d: dict[str, Any]) -> ProfilePack:
    kind = "stripped" if d["pack"] == "stripped" else "standard"
    profiles = tuple(
        ConsumerProfile(
            id=p["id"],
            description=p["description"],
            target_wtp=int(p["target_wtp"]),
            pack=kind,  # type: ignore[arg-type]
            variant=int(p.get("variant", 1)),
        )
        for p in d["profiles"]
    )
    return ProfilePack(d["pack"], d["version"], bool(d.get("synthetic", False)), profiles)


def load_profile_pack(path: str | Path) -> ProfilePack:
    """Load a user-supplied profile pack (same JSON shape as the built-in ones)."""
    return _profile_pack_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@lru_cache(maxsize=None)
def builtin_profile_pack(name: Literal["standard", "stripped", "factorial"]) -> ProfilePack:
    return _profile_pack_from_dict(json.loads(_data_text(f"profiles_{name}.json")))


@lru_cache(maxsize=None)
def catalog() -> tuple[Product, ...]:
    d = json.loads(_data_text("catalog.json"))
    products = tuple(Product.from_dict(p) for p in d["products"])
    prices = [p.price for p in products]
    if prices != sorted(prices) or len(set(prices)) != len(prices):
        raise PackError("catalog prices must be strictly ascending by code")
    return products


@lru_cache(maxsize=None)
def numeric_pack() -> NumericPack:
    d = json.loads(_data_text("numeric.json"))
    return NumericPack(
        version=d["version"],
        budget_sentence=d["budget_sentence"],
        privacy_directive=d["privacy_directive"],
        cells={c["id"]: int(c["budget"]) for c in d["cells"]},
    )


@lru_cache(maxsize=None)
def scaffolds() -> dict[str, Any]:
    return json.loads(_data_text("scaffolds.json"))


def pack_versions() -> dict[str, str]:
    """Version plus short content digest of every built-in data file."""
    out = {}
    for name in sorted(
        p.name for p in resources.files("prefleak.data").iterdir() if p.name.endswith((".json", ".txt"))
    ):
        text = _data_text(name)
        digest = hashlib.sha256(text.encode()).hexdigest()[:12]
        version = json.loads(text).get("version", "?") if name.endswith(".json") else "-"
        out[name] = f"{version}+{digest}"
    return out


@lru_cache(maxsize=None)
def _financial_register_re() -> re.Pattern[str]:
    stems = data_lines("financial_register.txt")
    return re.compile(r"\b(?:" + "|".join(map(re.escape, stems)) + r")\w*", re.IGNORECASE)


def financial_register_hits(text: str) -> list[str]:
    return [m.group(0) for m in _financial_register_re().finditer(text)]


def all_profiles() -> dict[str, ConsumerProfile]:
    out: dict[str, ConsumerProfile] = {}
    for name in ("standard", "stripped", "factorial"):
        out.update(builtin_profile_pack(name).by_id())  # type: ignore[arg-type]
    return out


# --------------------------------------------------------------------------
# Cells and plans

_CELL_RE = re.compile(r"(vp|np|sv)_(\d+)|fv_(\d+)_v([23])")


def target_for_cell(cell_id: str) -> int:
    """Target willingness to pay, in cents, imprinted for a profile or numeric cell."""
    profiles = all_profiles()
    if cell_id in profiles:
        return profiles[cell_id].target_wtp
    budgets = numeric_pack().cells
    if cell_id in budgets:
        return budgets[cell_id]
    raise KeyError(f"unknown cell id {cell_id!r}")


def cell_ids(condition: Condition) -> list[str]:
    if condition == "verbal":
        return [p.id for p in builtin_profile_pack("standard").profiles]
    if condition == "stripped":
        return [p.id for p in builtin_profile_pack("stripped").profiles]
    return list(numeric_pack().cells)


def profile_id_for(condition: Condition, cell_id: str, variant: int) -> str | None:
    if condition == "numeric":
        return None
    if variant == 1:
        return cell_id
    dollars = target_for_cell(cell_id) // 100
    return f"fv_{dollars}_v{variant}"


def instruction_for(
    trial: PlannedTrial, profiles: dict[str, ConsumerProfile] | None = None
) -> Instruction:
    """Build the buyer delegation for a planned trial."""
    if trial.condition == "numeric":
        return Instruction.numeric(target_for_cell(trial.cell_id), trial.scaffold)
    profiles = profiles if profiles is not None else all_profiles()
    pid = profile_id_for(trial.condition, trial.cell_id, trial.variant)
    try:
        profile = profiles[pid]  # type: ignore[index]
    except KeyError:
        raise KeyError(f"no profile {pid!r} for trial {trial.trial_id}") from None
    return Instruction.verbal(profile, trial.scaffold)


def label_for(trial: PlannedTrial, status: Literal["complete", "lost"] = "complete") -> TrialLabel:
    return TrialLabel(
        trial_id=trial.trial_id,
        condition=trial.condition,
        cell_id=trial.cell_id,
        target_wtp=target_for_cell(trial.cell_id),
        profile_id=profile_id_for(trial.condition, trial.cell_id, trial.variant),
        variant=trial.variant,
        scaffold=trial.scaffold,
        trial_number=trial.trial_number,
        seed=trial.seed,
        status=status,
    )


def trial_seed(master_seed: int, key: tuple[Any, ...]) -> int:
    """64-bit seed derived from the master seed and the trial tuple."""
    material = json.dumps([master_seed, *key]).encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big")


def _trial(master_seed: int, condition: Condition, cell: str, variant: int, scaffold: Scaffold, n: int) -> PlannedTrial:
    key = (condition, cell, variant, scaffold, n)
    return PlannedTrial(condition, cell, variant, scaffold, n, trial_seed(master_seed, key))


def build_plan(design: Design, trials_per_cell: int, master_seed: int) -> ExperimentPlan:
    """Enumerate the trials of a design.

    ``main`` crosses verbal and numeric conditions with the six cells,
    ``factorial`` adds the five non-baseline (variant, scaffold) combinations
    for each verbal cell, and ``stripped`` runs the stripped-vocabulary pack.
    """
    if isinstance(trials_per_cell, bool) or not isinstance(trials_per_cell, int) or trials_per_cell < 1:
        raise PlanError(f"trials_per_cell must be >= 1, got {trials_per_cell!r}")
    trials: list[PlannedTrial] = []
    numbers = range(1, trials_per_cell + 1)
    if design == "main":
        for condition in ("verbal", "numeric"):
            for cell in cell_ids(condition):  # type: ignore[arg-type]
                trials += [_trial(master_seed, condition, cell, 1, "A", n) for n in numbers]  # type: ignore[arg-type]
    elif design == "factorial":
        combos = [(v, s) for v in VARIANTS for s in SCAFFOLDS if (v, s) != (1, "A")]
        for cell in cell_ids("verbal"):
            for v, s in combos:
                trials += [_trial(master_seed, "verbal", cell, v, s, n) for n in numbers]
    elif design == "stripped":
        for cell in cell_ids("stripped"):
            trials += [_trial(master_seed, "stripped", cell, 1, "A", n) for n in numbers]
    else:
        raise PlanError(f"unknown design {design!r}")
    return ExperimentPlan(name=f"{design}-n{trials_per_cell}", trials=tuple(trials), master_seed=master_seed)


def extend_plan(plan: ExperimentPlan, additions: dict[tuple[str, str, int, str], int]) -> ExperimentPlan:
    """Append ``count`` new trial numbers for each (condition, cell, variant, scaffold)."""
    trials = list(plan.trials)
    for (condition, cell, variant, scaffold), count in sorted(additions.items()):
        existing = [t.trial_number for t in trials if t.key[:4] == (condition, cell, variant, scaffold)]
        start = max(existing, default=0) + 1
        trials += [
            _trial(plan.master_seed, condition, cell, variant, scaffold, n)  # type: ignore[arg-type]
            for n in range(start, start + count)
        ]
    return ExperimentPlan(name=plan.name, trials=tuple(trials), master_seed=plan.master_seed)

from enum import Enum


class _ParsableEnum(str, Enum):
    """String enum that also accepts legacy spellings (case, dashes, underscores)."""

    @classmethod
    def _aliases(cls) -> dict[str, "_ParsableEnum"]:
        return {}

    @classmethod
    def from_any(cls, value):
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            normalized = value.strip().lower().replace("_", "-")
            aliases = cls._aliases()
            if normalized in aliases:
                return aliases[normalized]
            for member in cls:
                if normalized in (member.value, member.name.lower().replace("_", "-")):
                    return member
        raise ValueError(f"Cannot parse {value!r} into {cls.__name__}")


class PositionScheme(_ParsableEnum):
    ABSOLUTE_LEARNED = "absolute-learned"
    ROTARY_PRE_CACHE = "rotary-pre-cache"

    @classmethod
    def _aliases(cls):
        return {
            "absolute": cls.ABSOLUTE_LEARNED,
            "learned": cls.ABSOLUTE_LEARNED,
            "rotary": cls.ROTARY_PRE_CACHE,
            "rope": cls.ROTARY_PRE_CACHE,
        }


class DMCVariant(_ParsableEnum):
    DMC = "dmc"
    DMC_C = "dmc-c"
    DMC_HARD_C = "dmc-hardc"
    UNIFORM_OMEGA = "uniform-omega"

    @classmethod
    def _aliases(cls):
        return {
            "uniform-ω": cls.UNIFORM_OMEGA,
            "uniform": cls.UNIFORM_OMEGA,
            "dmc-hard-c": cls.DMC_HARD_C,
            "hardc": cls.DMC_HARD_C,
        }

    @property
    def label(self):
        return _VARIANT_LABELS.get(self, self.name)

    @property
    def uses_head_consistency(self) -> bool:
        return self is DMCVariant.DMC_C

    @property
    def shares_decisions(self) -> bool:
        return self is DMCVariant.DMC_HARD_C


_VARIANT_LABELS = {
    DMCVariant.DMC: "DMC",
    DMCVariant.DMC_C: "DMC-C",
    DMCVariant.DMC_HARD_C: "DMC-HardC",
    DMCVariant.UNIFORM_OMEGA: "Uniform Weighting",
}


class CompressionPrior(_ParsableEnum):
    GLOBAL = "global"
    LOCAL = "local"


class ScheduleMode(_ParsableEnum):
    LINEAR_RAMP = "linear-ramp"
    IMMEDIATE = "immediate"

    @classmethod
    def _aliases(cls):
        return {"linear": cls.LINEAR_RAMP, "ramp": cls.LINEAR_RAMP}


class BaselineKind(_ParsableEnum):
    NONE = "none"
    GQA = "gqa"
    H2O = "h2o"
    TOVA = "tova"
    FIXED_POOL = "fixed-pool"

    @property
    def needs_training(self) -> bool:
        # eviction policies work on any checkpoint as-is
        return self in (BaselineKind.NONE, BaselineKind.GQA, BaselineKind.FIXED_POOL)


class EvictionPolicy(_ParsableEnum):
    H2O = "h2o"
    TOVA = "tova"

    @classmethod
    def _aliases(cls):
        return {"h₂o": cls.H2O}


class EvalMode(_ParsableEnum):
    VANILLA = "vanilla"
    DMC_TRAIN_PATH = "dmc-train-path"
    DMC_INFER_PATH = "dmc-infer-path"
    FIXED_POOL = "fixed-pool"
    H2O = "h2o"
    TOVA = "tova"

    @classmethod
    def _aliases(cls):
        return {
            "train": cls.DMC_TRAIN_PATH,
            "infer": cls.DMC_INFER_PATH,
            "dmc": cls.DMC_INFER_PATH,
        }


class RetrofitPhase(_ParsableEnum):
    PRETRAIN = "pretrain"
    ADAPTATION = "adaptation"
    RAMP = "ramp"
    SOLIDIFY = "solidify"
    UPTRAIN = "uptrain"

"""Exception hierarchy. Every error carries a stable machine-readable code."""


class StonefuseError(Exception):
    code = "STONEFUSE_ERROR"


class ManifestError(StonefuseError):
    code = "MANIFEST_INVALID"


class SplitError(StonefuseError):
    code = "SPLIT_INVALID"


class PatchError(StonefuseError):
    code = "PATCH_INVALID"


class DegeneratePatchError(PatchError):
    code = "PATCH_DEGENERATE"


class SynthError(StonefuseError):
    code = "SYNTH_INVALID"


class ShapeError(StonefuseError):
    code = "SHAPE_MISMATCH"


class ConfigError(StonefuseError):
    code = "CONFIG_INVALID"


class TrainingError(StonefuseError):
    code = "TRAINING_FAILED"


class WeightsError(StonefuseError):
    code = "WEIGHTS_UNAVAILABLE"


class LineageError(StonefuseError):
    code = "LINEAGE_BROKEN"


class FusionError(StonefuseError):
    code = "FUSION_INVALID"


class PairingError(StonefuseError):
    code = "PAIRING_INVALID"


class MetricsError(StonefuseError):
    code = "METRICS_INVALID"


class VizError(StonefuseError):
    code = "VIZ_INVALID"


class PlanError(StonefuseError):
    code = "PLAN_INVALID"

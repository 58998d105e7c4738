"""Exception hierarchy shared by every module."""


class CrystalScreenError(Exception):
    """Base class; the CLI maps these to exit code 1."""

    code = "error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class DegenerateLattice(CrystalScreenError):
    code = "degenerate_lattice"


class SpeciesOutOfRange(CrystalScreenError):
    code = "species_out_of_range"


class InvalidCrystal(CrystalScreenError):
    code = "invalid_crystal"


class CifError(CrystalScreenError):
    code = "cif_error"


class MissingElementalReference(CrystalScreenError):
    code = "missing_elemental_reference"


class InfeasibleComposition(CrystalScreenError):
    code = "infeasible_composition"


class NotARotation(CrystalScreenError):
    code = "not_a_rotation"


class ShapeMismatch(CrystalScreenError):
    code = "shape_mismatch"


class NonFiniteLoss(CrystalScreenError):
    code = "non_finite_loss"

    def __init__(self, message, batch_ids=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids or [])

    def to_dict(self):
        d = super().to_dict()
        d["batch_ids"] = self.batch_ids
        return d


class DegenerateEmbedding(CrystalScreenError):
    code = "degenerate_embedding"


class StepOutOfRange(CrystalScreenError):
    code = "step_out_of_range"


class DecodeFailure(CrystalScreenError):
    code = "decode_failure"


class EmptyCorpus(CrystalScreenError):
    code = "empty_corpus"


class EmptyReferenceSet(CrystalScreenError):
    code = "empty_reference_set"


class CheckpointError(CrystalScreenError):
    code = "checkpoint_error"


class ConfigError(CrystalScreenError):
    code = "config_error"

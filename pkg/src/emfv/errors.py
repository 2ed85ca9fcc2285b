"""Exception hierarchy. Every error carries a machine-readable ``code``."""


class EmfvError(Exception):
    code = "error"


class DimensionError(EmfvError, ValueError):
    code = "dimension_mismatch"


class EmptyGalleryError(EmfvError, ValueError):
    code = "empty_gallery"


class DegenerateVectorError(EmfvError, ValueError):
    code = "degenerate_vector"


class LayerShapeError(EmfvError, ValueError):
    code = "layer_shape"


class LabelError(EmfvError, ValueError):
    code = "bad_label"


class BandCollisionError(EmfvError):
    code = "band_collision"

    def __init__(self, pairs):
        self.pairs = [tuple(p) for p in pairs]
        names = ", ".join(f"{a!r}/{b!r}" for a, b in self.pairs)
        super().__init__(f"overlapping bands: {names}")


class DuplicatePersonError(EmfvError):
    code = "duplicate_person"


class UnknownPersonError(EmfvError, KeyError):
    code = "unknown_person"

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown person"


class FormatError(EmfvError):
    code = "bad_format"


class InvariantViolationError(EmfvError):
    code = "invariant_violation"


class SerializationError(EmfvError):
    code = "serialization"

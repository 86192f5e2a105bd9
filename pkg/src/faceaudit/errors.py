"""Exception types shared across the toolkit."""


class FaceauditError(Exception):
    """Base class for all toolkit errors."""


# -- corpus --------------------------------------------------------------

class MissingLabel(FaceauditError):
    """An image file has no row in the labels CSV."""

    def __init__(self, filename):
        self.filename = filename
        super().__init__(f"no label row for image file: {filename}")


class DuplicateIdentityVariant(FaceauditError):
    """Two records share the same (identity_id, variant) pair."""


class UnreadableImage(FaceauditError):
    """An image file exists but cannot be decoded."""


class EmptyBBox(FaceauditError):
    """A bounding box with zero or negative area."""


class BBoxOutOfBounds(FaceauditError):
    """A bounding box that extends past the image borders."""


class InsufficientGroup(FaceauditError):
    """A (country, gender) cell has fewer identities than required."""

    def __init__(self, country, gender, needed, available):
        self.country = country
        self.gender = gender
        self.needed = needed
        self.available = available
        super().__init__(
            f"group ({country}, {gender}): need {needed} identities, "
            f"have {available}"
        )


class MissingVariant(FaceauditError):
    """A required adversarial variant does not exist for an identity."""

    def __init__(self, identity_id, kind):
        self.identity_id = identity_id
        self.kind = kind
        super().__init__(f"identity {identity_id} has no {kind} variant")


# -- variants ------------------------------------------------------------

class BadAmplitude(FaceauditError):
    """Noise amplitude outside (0, 1]."""


class BadRadius(FaceauditError):
    """Spread radius below 1."""


class FaceNotFound(FaceauditError):
    """The landmark provider found no face in the image."""


# -- backends ------------------------------------------------------------

class TransportError(FaceauditError):
    """Network-level or IO-level failure talking to a backend."""


class AuthError(FaceauditError):
    """Backend rejected the configured credentials."""


class FaceNotDetected(FaceauditError):
    """Backend reported that no face was present in the image."""


# -- model / training ----------------------------------------------------

class ShapeMismatch(FaceauditError):
    """Input tensor shape differs from the model's configured input."""


class DimMismatch(FaceauditError):
    """Embeddings or maps with inconsistent dimensions."""


class NonFiniteLoss(FaceauditError):
    """Training produced a NaN or infinite loss."""


class LabelMismatch(FaceauditError):
    """Training labels do not match the checkpoint's task."""


class NoConvLayer(FaceauditError):
    """Grad-CAM requested on a model without convolutional layers."""


# -- audit ---------------------------------------------------------------

class MissingCell(FaceauditError):
    """A disparity query where one gender cell is absent."""


class InsufficientCells(FaceauditError):
    """Variant stability requested with fewer than two variant cells."""


class EmptyGroup(FaceauditError):
    """An aggregate over zero members."""

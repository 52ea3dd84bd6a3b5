"""Exception hierarchy shared across the package."""


class RegistrationError(Exception):
    """Base class for all errors raised by cralign."""


class InvalidArgumentError(RegistrationError, ValueError):
    pass


class SingularMatrixError(RegistrationError, ValueError):
    pass


class ConstantTargetError(RegistrationError, ValueError):
    """The target intensities have (numerically) zero variance."""


class NoOverlapError(RegistrationError):
    """Warped moving image no longer overlaps the fixed grid."""


class NoAdmissiblePatchesError(RegistrationError):
    pass


class PhantomGenerationError(RegistrationError):
    pass


class NiftiError(RegistrationError):
    """Base class for NIfTI decoding/encoding problems."""


class NiftiFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    def __init__(self, code):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class DimensionalityError(NiftiError):
    pass


class TruncationError(NiftiError):
    pass


class DocumentError(RegistrationError, ValueError):
    """Malformed affine document."""

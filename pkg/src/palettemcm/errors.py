"""Exception types.

Every error carries an ``exit_code`` so the command-line front end can map
failures onto its documented exit statuses without a lookup table.
"""


class PaletteMcmError(Exception):
    exit_code = 1


# -- IO / decoding (exit 2) -------------------------------------------------

class IoError(PaletteMcmError, OSError):
    exit_code = 2


class DecodeError(PaletteMcmError):
    exit_code = 2


# -- corpus (exit 3) --------------------------------------------------------

class EmptyCorpus(PaletteMcmError):
    exit_code = 3


# -- configuration / model / data shape (exit 4) ----------------------------

class InvalidConfig(PaletteMcmError, ValueError):
    exit_code = 4


class ShapeMismatch(PaletteMcmError, ValueError):
    exit_code = 4


class MissingCondition(PaletteMcmError, ValueError):
    exit_code = 4


class UnexpectedCondition(PaletteMcmError, ValueError):
    exit_code = 4


class FormatError(PaletteMcmError, ValueError):
    exit_code = 4


class VersionError(FormatError):
    exit_code = 4


class EmptyDataset(PaletteMcmError, ValueError):
    exit_code = 4


class EmptyTargets(PaletteMcmError, ValueError):
    exit_code = 4


class MissingEmbedding(PaletteMcmError):
    exit_code = 4

    def __init__(self, missing_ids):
        self.missing_ids = list(missing_ids)
        super().__init__("missing condition embeddings for ids: " + ", ".join(self.missing_ids))


class ParseError(PaletteMcmError, ValueError):
    exit_code = 4

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateId(PaletteMcmError, ValueError):
    exit_code = 4


# -- palette / sequence input (exit 5) --------------------------------------

class InvalidColor(PaletteMcmError, ValueError):
    exit_code = 5


class PaletteInputError(PaletteMcmError, ValueError):
    exit_code = 5


class NoMaskedSlots(PaletteInputError):
    pass


class SequenceTooShort(PaletteInputError):
    pass


class MalformedSequence(PaletteInputError):
    pass


class TooManyMasks(PaletteInputError):
    pass


class PaletteTooLarge(PaletteInputError):
    pass


# -- algorithmic preconditions ----------------------------------------------

class TooFewPoints(PaletteMcmError, ValueError):
    exit_code = 4


class ImageTooSmall(PaletteMcmError, ValueError):
    exit_code = 4


# -- resource caps (exit 6) -------------------------------------------------

class TooManyPoints(PaletteMcmError, ValueError):
    exit_code = 6

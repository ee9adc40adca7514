"""Exporter exceptions, mirroring the consumer's exit-code convention."""


class ExporterError(Exception):
    exit_code = 1


class SpecError(ExporterError):
    """Invalid export specification."""

    exit_code = 1


class InputError(ExporterError):
    """Unusable input data (bad manifest, empty class, no images)."""

    exit_code = 2

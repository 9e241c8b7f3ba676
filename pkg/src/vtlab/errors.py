"""Shared exception types."""


class VtlabError(Exception):
    pass


class ConfigError(VtlabError):
    pass


class GeometryError(VtlabError):
    pass


class ContractError(VtlabError):
    pass


class TransferError(VtlabError):
    pass


class FormatError(VtlabError):
    pass


class ReportError(VtlabError):
    pass

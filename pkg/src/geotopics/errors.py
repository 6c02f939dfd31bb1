class GeotopicsError(Exception):
    """Base class for data and model errors raised by this package."""


class DataFormatError(GeotopicsError):
    pass


class ModelFormatError(GeotopicsError):
    pass


class OutsideSupportError(GeotopicsError):
    """Every topic density underflows at the queried location."""


class RegionOutsideGridError(GeotopicsError):
    """Less than half of a region's Gaussian mass falls on the grid."""

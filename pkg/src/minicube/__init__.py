"""minicube: windowed raster access, zonal statistics and a small query service
for stacks of single-scene GeoTIFFs."""

__version__ = "0.1.0"

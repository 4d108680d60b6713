from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("avforge")
except PackageNotFoundError:
    __version__ = "unknown"

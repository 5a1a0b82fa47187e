"""evmtrail: bytecode-level inspection of multi-contract EVM protocols."""

__version__ = "0.1.0"


class InputError(Exception):
    """Bad user-supplied input: missing file, malformed hex, broken manifest."""


def __getattr__(name):
    # lazy re-exports so `import evmtrail` stays light for the CLI
    from importlib import import_module

    surface = {
        "decode_bytecode": "isa", "parse_hex": "isa", "format_listing": "isa",
        "build_cfg": "cfg",
        "link": "linking", "link_report": "linking",
        "enumerate_paths": "paths", "enumerate_protocol_paths": "paths",
        "entries_for_protocol": "paths", "PathBounds": "paths",
        "validate_path": "symstack", "filter_feasible": "symstack",
        "assemble_graph": "featgraph", "normalize_adjacency": "featgraph",
        "PipelineConfig": "pipeline", "scan_protocol": "pipeline",
        "train_detector": "pipeline",
    }
    if name in surface:
        return getattr(import_module(f".{surface[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

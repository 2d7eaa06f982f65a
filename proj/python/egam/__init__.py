from ._core import (
    Error,
    NumericalError,
    DimensionError,
    InvalidTransition,
    Kind,
    Instance,
    Policy,
    Solution,
    dihedral_transform,
    edge_features,
    exhaustive,
    generate_dataset,
    generate_instance,
    gradcheck,
    held_karp,
    kind_name,
    nearest_neighbor,
    node_features,
    parse_kind,
    read_dataset,
    reference_solution,
    solution_cost,
    train,
    write_dataset,
)

__all__ = [name for name in dir() if not name.startswith("_")]

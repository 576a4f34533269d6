from .rng import RngStream, draw_standard_normal
from .tape import (
    NumericDomainError,
    PRIMITIVES,
    Tape,
    Var,
    add,
    backward,
    exp,
    lgamma,
    log,
    log1mexp,
    matmul,
    mul,
    neg,
    reciprocal,
    record,
    relu,
    softplus,
    square,
    sum_,
    value_of,
)

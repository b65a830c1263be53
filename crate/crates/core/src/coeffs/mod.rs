//! Coefficient model: expressions, systems, builtin scenarios and the
//! structural checks every system is expected to pass.

mod check;
mod expr;
mod system;

pub use check::{
    check_structure, Counterexample, Property, PropertyCheck, StructureReport, SAMPLE_RADII,
};
pub use expr::{eval_expr, parse_expr, BinaryOp, Expr, ExprError, Node, Scope, UnaryOp};
pub use system::{
    builtin_def, builtin_system, ModeCoefficients, ModeDef, SpecError, SystemDef, SystemSpec,
    BUILTIN_IDS,
};

//! One module per subcommand.

pub mod connect;
pub mod ensemble;
pub mod gen_data;
pub mod sweep;
pub mod train;

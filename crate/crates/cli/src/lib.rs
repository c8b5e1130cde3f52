//! Command implementations behind the `hiertcn` binary.

pub mod args;
pub mod commands;
pub mod http;

use hiertcn::Error;

pub use args::{Cli, Command};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_DATA: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

pub fn run(cli: Cli) -> hiertcn::Result<()> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a).map(|_| ()),
        Command::Train(a) => commands::train(&a).map(|_| ()),
        Command::Eval(a) => commands::eval(&a).map(|_| ()),
        Command::Recommend(a) => commands::recommend(&a).map(|_| ()),
        Command::EmbedItems(a) => commands::embed_items(&a).map(|_| ()),
        Command::Serve(a) => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(http::serve(&a))
        }
    }
}

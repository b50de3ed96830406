use clap::Parser;

fn main() -> anyhow::Result<()> {
    eegfuse::cli::run(eegfuse::cli::Cli::parse())
}

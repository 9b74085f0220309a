use clap::Parser;

fn main() -> anyhow::Result<()> {
    bundle_forge_cli::run(bundle_forge_cli::Cli::parse())
}

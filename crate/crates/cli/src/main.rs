use clap::{Parser, Subcommand};
use mrsr_cli::*;

#[derive(Parser)]
#[command(name = "mrsr", version, about = "Volumetric MRI super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded multi-echo phantom dataset.
    Phantom(PhantomArgs),
    /// Factor-2 k-space truncation of every volume in a directory.
    Degrade(DegradeArgs),
    /// Factor-2 upsampling by zero-filling or trilinear interpolation.
    Upsample(UpsampleArgs),
    /// Train a network on a phantom dataset.
    Train(TrainArgs),
    /// Metrics report over the test subjects.
    Evaluate(EvaluateArgs),
    /// Slice panels and residual maps for visual comparison.
    Compare(CompareArgs),
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Upsample(a) => cmd_upsample(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Compare(a) => cmd_compare(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

use ecgnet_cli::{main_with_args, Context};

fn main() {
    let mut ctx = Context::from_env(Box::new(std::io::stderr()));
    std::process::exit(main_with_args(std::env::args(), &mut ctx));
}

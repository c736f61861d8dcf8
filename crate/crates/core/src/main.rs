use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (code, record) = lvaegan::cli::run(std::env::args_os());
    if code == 0 {
        match record.get("help").and_then(|h| h.as_str()) {
            Some(help) => print!("{help}"),
            None => println!("{record}"),
        }
    } else {
        eprintln!("{record}");
    }
    ExitCode::from(code as u8)
}

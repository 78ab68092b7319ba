use std::io::{self, Write};

fn main() {
    let env = |name: &str| std::env::var(name).ok();
    let code = {
        let (stdout, stderr, stdin) = (io::stdout(), io::stderr(), io::stdin());
        let mut io = cvmg_cli::Io {
            env: &env,
            stdin: &mut stdin.lock(),
            stdout: &mut stdout.lock(),
            stderr: &mut stderr.lock(),
        };
        cvmg_cli::run(std::env::args_os(), &mut io)
    };
    let _ = io::stdout().flush();
    std::process::exit(code);
}

//! Opcodes shipped with the CLI and the worker daemon.

use std::thread;
use std::time::Duration;

use skelflow::codec::{as_int, int};
use skelflow::OpcodeRegistry;

fn int_arg(p: &skelflow::Payload) -> Result<i64, String> {
    as_int(p).ok_or_else(|| "expected an integer payload".to_string())
}

type IntFn = fn(i64) -> i64;

/// The standard opcode set. `work` and `nap` sleep for `grain` before
/// returning, which sets the compute grain of synthetic runs.
///
/// | name   | in | out | result                         |
/// |--------|----|-----|--------------------------------|
/// | id     | 1  | 1   | x                              |
/// | echo   | 1  | 1   | x, any payload                 |
/// | inc    | 1  | 1   | x + 1                          |
/// | dbl    | 1  | 1   | 2x                             |
/// | sq     | 1  | 1   | x²                             |
/// | neg    | 1  | 1   | -x                             |
/// | add    | 2  | 1   | x + y                          |
/// | mul    | 2  | 1   | x · y                          |
/// | split  | 1  | 2   | (x / 2, x - x / 2)             |
/// | work   | 1  | 1   | 3x + 1 after `grain`           |
/// | nap    | 1  | 1   | x after `grain`, any payload   |
/// | fail   | 1  | 1   | always an error                |
pub fn standard_registry(grain: Duration) -> OpcodeRegistry {
    let mut r = OpcodeRegistry::new();
    let unary_int: [(&str, IntFn); 4] = [
        ("inc", |x| x.wrapping_add(1)),
        ("dbl", |x| x.wrapping_mul(2)),
        ("sq", |x| x.wrapping_mul(x)),
        ("neg", |x| x.wrapping_neg()),
    ];
    for (name, f) in unary_int {
        r.register_unary(name, move |p| Ok(int(f(int_arg(p)?)))).expect("fresh name");
    }
    r.register_unary("id", |p| Ok(p.clone())).expect("fresh name");
    r.register_unary("echo", |p| Ok(p.clone())).expect("fresh name");
    r.register("add", 2, 1, |a| Ok(vec![int(int_arg(&a[0])?.wrapping_add(int_arg(&a[1])?))])).expect("fresh name");
    r.register("mul", 2, 1, |a| Ok(vec![int(int_arg(&a[0])?.wrapping_mul(int_arg(&a[1])?))])).expect("fresh name");
    r.register("split", 1, 2, |a| {
        let x = int_arg(&a[0])?;
        Ok(vec![int(x / 2), int(x - x / 2)])
    })
    .expect("fresh name");
    r.register_unary("work", move |p| {
        thread::sleep(grain);
        match as_int(p) {
            Some(x) => Ok(int(x.wrapping_mul(3).wrapping_add(1))),
            None => Ok(p.clone()),
        }
    })
    .expect("fresh name");
    r.register_unary("nap", move |p| {
        thread::sleep(grain);
        Ok(p.clone())
    })
    .expect("fresh name");
    r.register("fail", 1, 1, |_| Err("fail opcode invoked".into())).expect("fresh name");
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let r = standard_registry(Duration::ZERO);
        assert_eq!(r.call("inc", &[int(1)]).unwrap(), vec![int(2)]);
        assert_eq!(r.call("work", &[int(2)]).unwrap(), vec![int(7)]);
        assert_eq!(r.call("split", &[int(7)]).unwrap(), vec![int(3), int(4)]);
        assert_eq!(r.call("add", &[int(7), int(5)]).unwrap(), vec![int(12)]);
        assert_eq!(r.call("sq>neg", &[int(3)]).unwrap(), vec![int(-9)]);
        assert!(r.call("fail", &[int(1)]).is_err());
        assert!(r.call("inc", &[skelflow::Payload::new(vec![0xff])]).is_err());
    }
}

use rand::seq::SliceRandom;

use super::{EventLog, UserStream};
use crate::rng::Rng;

/// Train/validation/test event logs, partitioned by user.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub train: EventLog,
    pub validation: EventLog,
    pub test: EventLog,
}

/// Shuffles users and cuts them 8:1:1. With fewer than ten users the
/// validation and test parts still receive one user each when possible.
pub fn split_users(log: &EventLog, rng: &mut Rng) -> UserSplit {
    let mut users: Vec<UserStream> = log.users.clone();
    users.shuffle(rng);
    let n = users.len();
    let mut n_val = n / 10;
    let mut n_test = n / 10;
    if n >= 3 {
        n_val = n_val.max(1);
        n_test = n_test.max(1);
    }
    let test: Vec<UserStream> = users.split_off(n - n_test);
    let validation: Vec<UserStream> = users.split_off(n - n_test - n_val);
    let part = |users| EventLog {
        vocab: log.vocab.clone(),
        users,
    };
    UserSplit {
        train: part(users),
        validation: part(validation),
        test: part(test),
    }
}

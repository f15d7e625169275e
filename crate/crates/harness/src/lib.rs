//! Harness: synthetic worlds, training, evaluation and CLI.

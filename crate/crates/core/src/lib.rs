pub mod gateway;
pub mod notebook;
pub mod roles;
pub mod executor;
pub mod critique;
pub mod prompts;
pub mod eda;
pub mod clarifier;
pub mod insight;
pub mod story;
pub mod settings;

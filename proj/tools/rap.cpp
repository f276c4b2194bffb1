// Placeholder CLI; subcommands land with the harness module.
int main() { return 0; }

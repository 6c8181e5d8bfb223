// temporary entry point while the CLI is under construction
int main() { return 0; }

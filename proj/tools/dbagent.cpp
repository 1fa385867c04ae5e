#include "dbagent/cli.hpp"

int main(int argc, char** argv)
{
  return dbagent::cli::run_command(argc, argv);
}

#include <deepmpc/cli.hpp>

int main(int argc, char ** argv)
{
  return deepmpc::run_command(std::vector<std::string>(argv, argv + argc));
}

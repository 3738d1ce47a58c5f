#include <iostream>

int main() {
    std::cout << "dico: cli wiring pending\n";
    return 2;
}
